# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
import copy
import os

import yaml

from riskformer.util import (
    NO_DEFAULT,
    ConfigurationError,
    check_arg,
    fingerprint,
    get_dict_attr,
    logger,
    write_yaml,
)

#: Name of the resolved configuration written next to each command's outputs
RESOLVED_CONFIG_NAME = "resolved_config.yaml"

#: Built-in defaults.
DEFAULT_CONFIG = {
    "file_version": "riskformer#0",
    "seed": 42,
    "synth": {
        "accounts": 2000,
        "horizon_start": "2018-01",
        "horizon_end": "2022-12",
        "profile_weights": {"residential": 0.75, "sme": 0.2, "industrial": 0.05},
        "cadence_weights": {"quarterly": 0.7, "monthly": 0.2, "arbitrary": 0.1},
        "anomaly_fraction": 0.01,
        "anomaly_amplitude": 0.8,
        "noise": 0.1,
        "outlier_rate": 0.0,
        "outlier_value": 1.0e9,
    },
    "preprocess": {
        "horizon_start": "2018-01",
        "horizon_end": "2022-12",
        "outlier_cap": 1.0e6,
        "min_len": 7,
        "target_len": 58,
        "interval_anchor": "horizon",
        "strict": False,
    },
    "model": {
        "name": "tr-la",
        "encoder_blocks": 4,
        "decoder_blocks": 4,
        "ffn_dim": 16,
        "heads": 5,
        "head_dim": 5,
        "latent_dim": 10,
        "window": 5,
        "use_layer_norm": False,
        "positional_encoding": False,
        "conv_filters": [64, 32, 10],
        "kernel_size": 3,
        "ffnn_hidden": [64, 64],
    },
    "train": {
        "epochs": "auto",
        "batch_size": 10000,
        "micro_batch_size": 256,
        "subset": "full",
        "exclude_labeled": True,
        "learning_rate": 1.0e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1.0e-8,
        "ffnn_fraction": 1.0,
        "ffnn_epochs": 80,
        "ffnn_negative_ratio": 10,
        "eval_batch_size": 256,
        "representative_threshold": 1.0e-4,
        "representative_two_sided": False,
    },
    "cluster": {
        "fraction": 0.15,
        "descending": True,
        "thresholds": None,
        "consistency_denominator": "first",
    },
    "paths": {
        "readings": None,
        "labels": None,
        "dataset": None,
        "checkpoint": None,
    },
}

#: Keys that accept more than the type of their default value
EXTRA_TYPES = {
    "seed": (int,),
    "train.epochs": (int, str),
    "train.subset": (int, str),
    "model.window": (int, str),
    "cluster.thresholds": (list, type(None)),
}

#: Allowed string values for keys that accept strings
CHOICES = {
    "train.epochs": ("auto",),
    "train.subset": ("full", "100k", "10k"),
    "model.window": ("full",),
    "preprocess.interval_anchor": ("horizon", "first_reading"),
    "cluster.consistency_denominator": ("first", "union"),
}


def _allowed_types(key_path, default):
    if key_path in EXTRA_TYPES:
        return EXTRA_TYPES[key_path]
    if key_path.startswith("paths."):
        return (str, type(None))
    if isinstance(default, bool):
        return (bool,)
    if isinstance(default, float):
        return (float, int)
    return (type(default),)


def _type_names(types):
    return "|".join("null" if t is type(None) else t.__name__ for t in types)


class ConfigManager:
    """
    Hold the run configuration: defaults, merged with a YAML file, and
    overridden by command line values.
    """

    #: Currently supported syntax version.
    #: (Incremented when incompatible changes are introduced.)
    FILE_VERSION = 0

    def __init__(self, stats_manager=None):
        self.stats_manager = stats_manager
        #: (dict) The resolved configuration
        self.config_all = copy.deepcopy(DEFAULT_CONFIG)
        #: (str) Absolute path of the YAML file (None: defaults only)
        self.path = None
        #: (dict) lists of validation errors and warnings
        self.results = {
            "error": [],
            "warning": [],
        }

    def __getitem__(self, section):
        return self.config_all[section]

    def get(self, key_path, default=NO_DEFAULT):
        return get_dict_attr(self.config_all, key_path, default)

    @property
    def seed(self):
        return self.config_all["seed"]

    def report_error(self, msg, level="error", stack=None):
        check_arg(level, str, level in ("error", "warning"))
        self.results[level].append({"msg": msg, "path": stack or "?"})

    def has_errors(self, or_warnings=False):
        return bool(self.results["error"] or (or_warnings and self.results["warning"]))

    def _raise_results(self, title):
        lines = [f"  {e['path']}: {e['msg']}" for e in self.results["error"]]
        self.results["error"] = []
        raise ConfigurationError(f"{title}:\n" + "\n".join(lines))

    def _check_value(self, key_path, value):
        default = get_dict_attr(DEFAULT_CONFIG, key_path)
        types = _allowed_types(key_path, default)
        if isinstance(value, bool) and bool not in types:
            self.report_error(f"Expected {_type_names(types)}, but found bool", stack=key_path)
            return False
        if not isinstance(value, types):
            self.report_error(
                f"Expected {_type_names(types)}, but found {type(value).__name__}",
                stack=key_path,
            )
            return False
        if isinstance(value, str) and key_path in CHOICES and value not in CHOICES[key_path]:
            self.report_error(
                f"Expected one of {', '.join(CHOICES[key_path])}, but found {value!r}",
                stack=key_path,
            )
            return False
        return True

    def validate_config(self, cfg):
        """Check a (partial) configuration dict against the defaults.

        Raises:
            ConfigurationError
        Returns:
            (int) File format version as defined in `file_version: riskformer#N`
        """
        check_arg(cfg, dict)
        file_version = cfg.get("file_version", "")
        if not isinstance(file_version, str) or not file_version.startswith("riskformer#"):
            raise ConfigurationError(
                "Not a `riskformer` file (missing 'riskformer#VERSION' tag)."
            )
        try:
            file_version = int(file_version.split("#", 1)[1])
        except ValueError:
            raise ConfigurationError(f"Invalid file version tag: {cfg['file_version']!r}") from None
        if file_version != self.FILE_VERSION:
            raise ConfigurationError(
                f"File version mismatch: expected {self.FILE_VERSION}, but found {file_version}."
            )

        sections = set(cfg.keys())
        known_sections = set(DEFAULT_CONFIG.keys())
        extra = sections.difference(known_sections)
        if extra:
            raise ConfigurationError(
                "Configuration file check failed:\n  invalid sections: {}".format(
                    ", ".join(sorted(extra))
                )
            )

        for section, value in cfg.items():
            if section == "file_version":
                continue
            default = DEFAULT_CONFIG[section]
            if not isinstance(default, dict):
                self._check_value(section, value)
                continue
            if value is None:
                continue
            if not isinstance(value, dict):
                self.report_error("Expected a mapping", stack=section)
                continue
            for key, sub_val in value.items():
                key_path = f"{section}.{key}"
                if key not in default:
                    self.report_error("Unknown key", stack=key_path)
                elif isinstance(default[key], dict):
                    if not isinstance(sub_val, dict):
                        self.report_error("Expected a mapping", stack=key_path)
                else:
                    self._check_value(key_path, sub_val)

        if self.has_errors():
            self._raise_results("Configuration check failed")
        return file_version

    def read(self, path):
        """Merge a YAML configuration file over the defaults."""
        self.path = os.path.abspath(path)
        try:
            with open(path) as f:
                cfg = yaml.safe_load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: '{path}'") from None
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in '{path}': {e}") from None
        if not isinstance(cfg, dict):
            raise ConfigurationError(f"Expected a mapping in '{path}'")

        self.validate_config(cfg)
        for section, value in cfg.items():
            if isinstance(self.config_all.get(section), dict):
                self.config_all[section].update(value or {})
            else:
                self.config_all[section] = value
        logger.info(f"Read configuration '{path}'")
        return self.config_all

    def update_config(self, extra_config):
        """Override single entries, e.g. {'train.epochs': 20, 'seed': 7}.

        Values of list-typed keys may be passed as YAML strings ('[0.1, 0.05]').

        Raises:
            ConfigurationError
        """
        check_arg(extra_config, dict, or_none=True)
        if not extra_config:
            return
        for key_path, value in extra_config.items():
            try:
                default = get_dict_attr(DEFAULT_CONFIG, key_path)
            except (AttributeError, KeyError, ValueError, IndexError):
                default = NO_DEFAULT
            if default is NO_DEFAULT or isinstance(default, dict):
                self.report_error("Unknown configuration key", stack=key_path)
                continue
            types = _allowed_types(key_path, default)
            if isinstance(value, str) and list in types:
                try:
                    value = yaml.safe_load(value)
                except yaml.YAMLError:
                    pass
            if not self._check_value(key_path, value):
                continue
            if isinstance(default, float) and isinstance(value, int):
                value = float(value)
            segs = key_path.split(".")
            d = self.config_all
            for seg in segs[:-1]:
                d = d[seg]
            logger.info(f"Set {key_path}: {d.get(segs[-1])!r} -> {value!r}")
            d[segs[-1]] = value

        if self.has_errors():
            self._raise_results("Invalid configuration override")
        return

    def fingerprint(self, *sections):
        """SHA-256 of the canonical YAML dump of the config (or some sections)."""
        if sections:
            data = {s: self.config_all[s] for s in sections}
        else:
            data = self.config_all
        return fingerprint(data)

    def write_resolved(self, out_dir):
        path = os.path.join(out_dir, RESOLVED_CONFIG_NAME)
        write_yaml(path, self.config_all)
        logger.debug(f"Wrote resolved config to '{path}'")
        return path
