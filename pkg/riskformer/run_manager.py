# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
import os
import shutil
import tempfile
import time
from dataclasses import asdict
from datetime import datetime

import numpy as np
from snazzy import emoji, green, red, yellow

from riskformer import __version__
from riskformer.config_manager import ConfigManager
from riskformer.model_manager import ModelManager
from riskformer.models.base import load_checkpoint, save_checkpoint
from riskformer.plotting import plot_cluster_labels, plot_loss_curves
from riskformer.preprocess import (
    NormalizedDataset,
    read_labels,
    read_readings,
    run_pipeline,
    write_labels,
    write_readings,
)
from riskformer.riskcluster import (
    ERROR_COLUMN,
    PROBABILITY_COLUMN,
    RiskReport,
    cluster_metrics,
    fixed_size_clusters,
    metrics_summary,
    rank_by_error,
    report_basename,
    threshold_clusters,
    write_latents,
)
from riskformer.statistic_manager import StatisticManager
from riskformer.synthdata import SynthConfig, generate
from riskformer.training import (
    TrainConfig,
    representativeness_delta,
    sample_training_subset,
    train_autoencoder,
    train_ffnn,
)
from riskformer.util import (
    ConfigurationError,
    DataError,
    check_arg,
    fingerprint,
    format_elap,
    logger,
    read_yaml,
    write_yaml,
)

MANIFEST_NAME = "manifest.yaml"
READINGS_NAME = "readings.csv"
LABELS_NAME = "labels.txt"
DATASET_NAME = "dataset.npz"
PROVENANCE_NAME = "provenance.yaml"
CHECKPOINT_NAME = "model.npz"
HISTORY_NAME = "history.yaml"
REPORT_NAME = "report.csv"
LATENTS_NAME = "latents.csv"
METRICS_NAME = "metrics.yaml"
LOSS_PLOT_NAME = "loss.png"
CLUSTER_PLOT_NAME = "clusters.png"
REPRESENT_NAME = "representativeness.yaml"


def file_digest(path):
    with open(path, "rb") as f:
        return fingerprint(f.read())


def _unique_names(paths, base_fn):
    names = [base_fn(p) for p in paths]
    if len(set(names)) == len(names):
        return names
    res = []
    for p, name in zip(paths, names):
        parent = os.path.basename(os.path.dirname(os.path.abspath(p)))
        res.append(f"{parent}/{name}")
    if len(set(res)) != len(res):
        res = [f"{i}:{name}" for i, name in enumerate(names, 1)]
    return res


class RunManager:
    """
    Execute one CLI command: load data, compute, then commit all outputs to
    the output folder at once.

    Every command writes its artifacts, the resolved configuration and a
    manifest. Files are written to a staging folder first and moved into
    `out_dir` only after the command succeeded, so a failing command leaves
    no partial output.
    """

    COMMANDS = ("synth", "preprocess", "train", "infer", "evaluate", "plot", "represent")

    STAGES = ("ready", "running", "done", "failed")

    def __init__(self, out_dir, config_manager=None):
        check_arg(out_dir, str)
        #: :class:`~riskformer.statistic_manager.StatisticManager` of this run
        self.stats = StatisticManager()
        #: :class:`ConfigManager` holding the resolved configuration
        self.config_manager = config_manager or ConfigManager(self.stats)
        self.out_dir = out_dir
        self.command = None
        self.stage = "ready"
        #: (dict) artifact key -> file name inside `out_dir`
        self.outputs = {}
        #: (dict) input role -> path
        self.inputs = {}
        #: (dict) headline numbers of the command, shown in the summary
        self.results = {}
        self.start_dt = None
        self.start_stamp = None
        self.end_dt = None
        self.end_stamp = None

    def __str__(self):
        return f"RunManager<{self.command or '-'}, {self.stage.upper()}>"

    def set_stage(self, stage):
        check_arg(stage, str, stage in self.STAGES)
        logger.debug(f"Enter stage '{stage.upper()}'")
        self.stage = stage

    def load_config(self, path=None, overrides=None):
        """Read an optional YAML file, then apply `{dotted.key: value}` overrides."""
        cm = self.config_manager
        if path:
            cm.read(path)
        cm.update_config(overrides)
        return cm

    def has_errors(self):
        return self.stats.has_errors()

    # --- Output handling -----------------------------------------------------

    def _commit(self, artifacts):
        """Write `artifacts` [(key, file name, writer(path)), ...] to `out_dir`."""
        out_dir = os.path.abspath(self.out_dir)
        parent = os.path.dirname(out_dir)
        os.makedirs(parent, exist_ok=True)
        staging = tempfile.mkdtemp(prefix=".riskformer-", dir=parent)
        try:
            for key, fname, write in artifacts:
                write(os.path.join(staging, fname))
                self.outputs[key] = fname
            self.config_manager.write_resolved(staging)

            self.end_dt = datetime.now()
            self.end_stamp = time.monotonic()
            write_yaml(os.path.join(staging, MANIFEST_NAME), self.get_manifest(staging))

            os.makedirs(out_dir, exist_ok=True)
            for fname in sorted(os.listdir(staging)):
                os.replace(os.path.join(staging, fname), os.path.join(out_dir, fname))
        finally:
            shutil.rmtree(staging, ignore_errors=True)
        logger.info(f"Wrote {len(artifacts) + 2} file(s) to '{out_dir}'")
        return out_dir

    def get_manifest(self, folder):
        cm = self.config_manager
        return {
            "command": self.command,
            "version": __version__,
            "seed": cm.seed,
            "config_file": cm.path,
            "config_fingerprint": cm.fingerprint(),
            "start": self.start_dt.strftime("%Y-%m-%d %H:%M:%S"),
            "end": self.end_dt.strftime("%Y-%m-%d %H:%M:%S"),
            "elapsed": round(self.end_stamp - self.start_stamp, 3),
            "inputs": {k: os.path.abspath(v) for k, v in self.inputs.items()},
            "outputs": {
                key: {"file": fname, "sha256": file_digest(os.path.join(folder, fname))}
                for key, fname in self.outputs.items()
            },
            "results": dict(self.results),
            "stats": self.stats.as_dict(),
        }

    def get_cli_summary(self):
        cm = self.config_manager
        lines = []
        run_time = (self.end_stamp or time.monotonic()) - self.start_stamp
        has_errors = self.stage == "failed"

        ap = lines.append
        col = red if has_errors else green
        horz_line = col("=-" * 38 + "=")

        ap("Result Summary:")
        ap(horz_line)
        ap(f"riskformer '{self.command}' finished.")
        ap(f"  Config:   {cm.path or '(defaults)'}")
        ap(f"  Seed:     {cm.seed}")
        ap(f"  Output:   {os.path.abspath(self.out_dir)}")
        ap("  Start:    {}".format(self.start_dt.strftime("%Y-%m-%d %H:%M:%S")))
        ap(f"Run time {format_elap(run_time, high_prec=True)}.")
        timing = self.stats.format_timing("train.epoch")
        if timing != "n.a.":
            ap(f"Epochs:   {timing}")
        for key, value in self.results.items():
            if isinstance(value, float):
                value = f"{value:.6g}"
            ap(f"  {key}: {value}")
        warnings = self.stats["warnings"]
        if has_errors:
            pics = emoji(" 💥 💔 💥", "")
            ap(red(f"Result: ERROR: {self.stats.get('last_error')}" + pics))
        elif warnings:
            ap(yellow(f"Result: Ok, with {warnings:,} warnings."))
        else:
            pics = emoji(" ✨ 🍰 ✨", "")
            ap(green("Result: Ok." + pics))
        ap(horz_line)
        return "\n".join(lines)

    # --- Command dispatch ----------------------------------------------------

    def run(self, command, log_summary=True, **kwargs):
        """Execute `command` ('synth', 'train', ...) with its keyword arguments.

        Returns:
            whatever the `cmd_<command>` method returns
        Raises:
            RiskformerError: (or a subclass) on failure; no output is written
        """
        check_arg(command, str, command in self.COMMANDS)
        handler = getattr(self, f"cmd_{command}")
        self.command = command
        self.start_dt = datetime.now()
        self.start_stamp = time.monotonic()
        self.set_stage("running")
        try:
            res = handler(**kwargs)
        except Exception as e:
            self.stats.report_error(str(e))
            self.set_stage("failed")
            raise
        self.set_stage("done")
        if log_summary:
            logger.important(self.get_cli_summary())
        return res

    def _require_path(self, value, config_key, what):
        path = value or self.config_manager.get(config_key, None)
        if not path:
            raise ConfigurationError(f"Missing {what} (pass it or set `{config_key}`)")
        return path

    def _load_dataset(self, dataset):
        path = self._require_path(dataset, "paths.dataset", "dataset file")
        self.inputs["dataset"] = path
        return NormalizedDataset.load(path)

    def cmd_synth(self):
        """Generate synthetic readings and ground-truth labels."""
        cm = self.config_manager
        config = SynthConfig.from_config(cm["synth"], cm.seed)
        with self.stats.timer("synth.run"):
            records, labels = generate(config, self.stats)
        self.results.update(
            {"accounts": config.accounts, "readings": len(records), "labeled": len(labels)}
        )
        self._commit(
            [
                ("readings", READINGS_NAME, lambda p: write_readings(records, p)),
                ("labels", LABELS_NAME, lambda p: write_labels(labels, p)),
            ]
        )
        return records, labels

    def cmd_preprocess(self, readings=None, labels=None, strict=None):
        """Turn a readings file (plus optional labels) into a normalized dataset."""
        cm = self.config_manager
        readings = self._require_path(readings, "paths.readings", "readings file")
        labels = labels or cm.get("paths.labels", None)
        if strict is None:
            strict = cm["preprocess"]["strict"]
        self.inputs["readings"] = readings

        records = read_readings(readings, strict=strict, stats=self.stats)
        label_set = set()
        if labels:
            self.inputs["labels"] = labels
            label_set = read_labels(labels)
        dataset = run_pipeline(records, label_set, cm["preprocess"], self.stats)

        self.results.update(
            {
                "series": len(dataset),
                "seq_len": dataset.seq_len,
                "labeled": int(dataset.labels.sum()),
                "fingerprint": dataset.fingerprint(),
            }
        )
        self._commit(
            [
                ("dataset", DATASET_NAME, dataset.save),
                ("provenance", PROVENANCE_NAME, lambda p: write_yaml(p, dataset.provenance)),
            ]
        )
        return dataset

    def cmd_train(self, dataset=None, model=None):
        """Train one model family on a normalized dataset."""
        cm = self.config_manager
        if model:
            cm.update_config({"model.name": model})
        data = self._load_dataset(dataset)
        name = cm["model"]["name"]
        net = ModelManager.create_model(name, cm["model"], data.seq_len, seed=cm.seed)

        train_cfg = cm["train"]
        if net.kind == "classifier":
            config = TrainConfig.from_config(train_cfg, cm.seed, classifier=True)
            net, history = train_ffnn(
                net, data, None, train_cfg["ffnn_fraction"], config, stats=self.stats
            )
        else:
            config = TrainConfig.from_config(train_cfg, cm.seed)
            subset = sample_training_subset(data, config)
            net, history = train_autoencoder(
                net, subset, config, eval_dataset=data, stats=self.stats
            )

        saved_history = history.as_dict()
        store = net.to_store(
            dataset_fingerprint=data.fingerprint(),
            train=asdict(config),
            history=saved_history,
        )
        self.results.update(
            {
                "model": name,
                "weights": net.num_weights(),
                "epochs": len(history),
                "final_loss": float(history.losses[-1]),
            }
        )
        if history.final_error is not None:
            self.results["final_error"] = float(history.final_error)
        self._commit(
            [
                ("checkpoint", CHECKPOINT_NAME, lambda p: save_checkpoint(store, p)),
                ("history", HISTORY_NAME, lambda p: write_yaml(p, saved_history)),
            ]
        )
        return net, history

    def cmd_infer(self, dataset=None, checkpoint=None, latent=False):
        """Score every series, rank and cluster them into a risk report."""
        cm = self.config_manager
        data = self._load_dataset(dataset)
        checkpoint = self._require_path(checkpoint, "paths.checkpoint", "checkpoint file")
        self.inputs["checkpoint"] = checkpoint
        net, store = ModelManager.load_model(checkpoint)
        if net.seq_len != data.seq_len:
            raise DataError(
                f"Checkpoint expects seq_len {net.seq_len}, dataset has {data.seq_len}"
            )
        trained_on = store.metadata.get("dataset_fingerprint")
        if trained_on and trained_on != data.fingerprint():
            self.stats.report_warning("Scoring a dataset the model was not trained on")

        batch_size = cm["train"]["eval_batch_size"]
        with self.stats.timer("infer.score"):
            if net.kind == "classifier":
                scores = net.score(data.values, batch_size)
                score_name = PROBABILITY_COLUMN
            else:
                scores = net.sample_errors(data.values, batch_size)
                score_name = ERROR_COLUMN

        cluster_cfg = cm["cluster"]
        ranking = rank_by_error(
            dict(zip(data.account_ids.tolist(), scores.tolist())),
            descending=cluster_cfg["descending"],
        )
        if cluster_cfg["thresholds"]:
            assignment = threshold_clusters(ranking, cluster_cfg["thresholds"])
        else:
            assignment = fixed_size_clusters(ranking, cluster_cfg["fraction"])
        report = RiskReport.build(ranking, assignment, score_name=score_name)

        artifacts = [("report", REPORT_NAME, report.write_csv)]
        self.results.update(
            {"model": net.get_script_name(), "accounts": len(report), "clusters": len(assignment)}
        )
        if data.labels.any():
            metrics = cluster_metrics(assignment, data.labeled_ids)
            first = metrics["clusters"][0]
            self.results["cluster1_recall"] = first["recall"]
            self.results["cluster1_precision"] = first["precision"]
            artifacts.append(("metrics", METRICS_NAME, lambda p: write_yaml(p, metrics)))

        if latent:
            if not hasattr(net, "encode"):
                raise ConfigurationError(
                    f"Model {net.get_script_name()!r} has no latent space to export"
                )
            latents = np.concatenate(
                [
                    net.encode(data.values[start : start + batch_size])
                    for start in range(0, len(data), batch_size)
                ]
            )
            artifacts.append(
                ("latents", LATENTS_NAME, lambda p: write_latents(p, data.account_ids, latents))
            )
        self._commit(artifacts)
        return report

    def cmd_evaluate(self, reports=None, labels=None):
        """Recall, precision and consistency of one or more risk reports."""
        cm = self.config_manager
        if not reports:
            raise ConfigurationError("Pass at least one report file")
        labels = self._require_path(labels, "paths.labels", "labels file")
        self.inputs["labels"] = labels
        for i, path in enumerate(reports, 1):
            self.inputs[f"report{i}"] = path

        loaded = [RiskReport.read_csv(p) for p in reports]
        names = _unique_names(reports, report_basename)
        summary = metrics_summary(
            loaded,
            read_labels(labels),
            denominator=cm["cluster"]["consistency_denominator"],
            names=names,
        )
        for name, m in summary["reports"].items():
            first = m["clusters"][0]
            self.results[name] = f"cluster 1 recall {first['recall']}, precision {first['precision']}"
        if "consistency" in summary:
            self.results["consistency_average"] = summary["consistency"]["average"]
        self._commit([("metrics", METRICS_NAME, lambda p: write_yaml(p, summary))])
        return summary

    def cmd_plot(self, checkpoints=(), reports=(), labels=None):
        """Render loss curves and per-cluster label histograms."""
        if not checkpoints and not reports:
            raise ConfigurationError("Pass checkpoint files and/or report files to plot")
        artifacts = []
        if checkpoints:
            histories = {}
            names = _unique_names(checkpoints, report_basename)
            for name, path in zip(names, checkpoints):
                self.inputs[f"checkpoint:{name}"] = path
                meta = load_checkpoint(path).metadata
                losses = (meta.get("history") or {}).get("losses")
                if not losses:
                    raise DataError(f"Checkpoint '{path}' has no training history")
                histories[f"{meta.get('model', '?')} ({name})"] = losses
            artifacts.append(("loss_plot", LOSS_PLOT_NAME, lambda p: plot_loss_curves(histories, p)))
        if reports:
            labels = self._require_path(labels, "paths.labels", "labels file")
            self.inputs["labels"] = labels
            loaded = [RiskReport.read_csv(p) for p in reports]
            summary = metrics_summary(
                loaded, read_labels(labels), names=_unique_names(reports, report_basename)
            )
            artifacts.append(
                (
                    "cluster_plot",
                    CLUSTER_PLOT_NAME,
                    lambda p: plot_cluster_labels(summary["reports"], p),
                )
            )
        self.results["figures"] = len(artifacts)
        self._commit(artifacts)
        return [name for _, name, _ in artifacts]

    def cmd_represent(self, dataset=None, threshold=None, two_sided=None):
        """Check whether the configured training subset represents the dataset."""
        cm = self.config_manager
        data = self._load_dataset(dataset)
        if threshold is None:
            threshold = cm["train"]["representative_threshold"]
        if two_sided is None:
            two_sided = cm["train"]["representative_two_sided"]
        name = cm["model"]["name"]
        if ModelManager.get_model_class(name).kind != "autoencoder":
            raise ConfigurationError(f"Representativeness needs an autoencoder, not {name!r}")

        def model_factory():
            return ModelManager.create_model(name, cm["model"], data.seq_len, seed=cm.seed)

        config = TrainConfig.from_config(cm["train"], cm.seed)
        subset = sample_training_subset(data, config)
        res = representativeness_delta(
            model_factory, subset, data, config, threshold, two_sided=two_sided, stats=self.stats
        )
        info = res.as_dict()
        info.update({"model": name, "subset_size": len(subset), "dataset_size": len(data)})
        self.results.update(info)
        self._commit([("representativeness", REPRESENT_NAME, lambda p: write_yaml(p, info))])
        return res


def read_manifest(out_dir):
    return read_yaml(os.path.join(out_dir, MANIFEST_NAME))
