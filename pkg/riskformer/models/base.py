# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Common base class of all model families, parameter storage and checkpoints.
"""
import io
import math
import os
import zipfile
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from riskformer import autodiff as ad
from riskformer.util import (
    CheckpointError,
    DataError,
    NonFiniteError,
    ShapeError,
    assert_always,
    check_arg,
    logger,
)

#: Format tag written to and required by checkpoint files
CHECKPOINT_FORMAT_VERSION = 1

#: Prefix of parameter entries inside a checkpoint archive
PARAM_PREFIX = "param/"


def glorot_uniform(rng, shape):
    """Return weights drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    For convolution kernels (K, C_in, C_out) the receptive field K scales both
    fans.
    """
    if len(shape) == 3:
        fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameter(rng, name, shape):
    """Biases start at 0, layer-norm scales at 1, weight matrices Glorot-uniform."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape, dtype=ad.DTYPE)
    if leaf.startswith("b") or len(shape) == 1:
        return np.zeros(shape, dtype=ad.DTYPE)
    return glorot_uniform(rng, shape)


@dataclass
class ParameterStore:
    """Named parameter arrays plus free-form metadata.

    Attributes:
        params (dict): hierarchical name (e.g. 'enc0.attn.wq') -> float64 array
        metadata (dict): YAML-serializable info (model name, spec, training run)
        format_version (int):
    """

    params: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params.keys())

    def check_names(self, expected):
        """Raise CheckpointError listing missing and unexpected parameter names."""
        expected = list(expected)
        missing = [n for n in expected if n not in self.params]
        extra = [n for n in self.params if n not in expected]
        if missing or extra:
            msg = []
            if missing:
                msg.append(f"missing parameters: {', '.join(missing)}")
            if extra:
                msg.append(f"unexpected parameters: {', '.join(extra)}")
            raise CheckpointError("Parameter mismatch; " + "; ".join(msg))

    def check_shapes(self, shapes):
        bad = [
            f"{name} {self.params[name].shape} != {tuple(shape)}"
            for name, shape in shapes.items()
            if tuple(self.params[name].shape) != tuple(shape)
        ]
        if bad:
            raise CheckpointError("Parameter shape mismatch: " + "; ".join(bad))


def save_checkpoint(store, path):
    """Write `store` as an uncompressed .npz archive.

    Payloads are stored as little-endian float64; metadata is a YAML string.
    """
    check_arg(store, ParameterStore)
    arrays = {
        "__format_version__": np.array(store.format_version, dtype="<i8"),
        "__metadata__": np.array(yaml.safe_dump(store.metadata, sort_keys=True)),
    }
    for name, value in store.params.items():
        arrays[PARAM_PREFIX + name] = np.asarray(value, dtype="<f8")

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    # np.savez() appends '.npz' to plain paths, so write through a file object
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"Wrote checkpoint '{path}' ({len(store)} parameters)")
    return path


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: if the file is missing, corrupt, or has no (or an
            unsupported) format version
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
        with np.load(io.BytesIO(raw), allow_pickle=False) as npz:
            entries = {name: npz[name] for name in npz.files}
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: '{path}'") from None
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as e:
        raise CheckpointError(f"Corrupt checkpoint '{path}': {e}") from None

    if "__format_version__" not in entries:
        raise CheckpointError(f"Checkpoint '{path}' has no format version")
    version = int(entries.pop("__format_version__"))
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint '{path}' has format version {version}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    meta = entries.pop("__metadata__", None)
    metadata = yaml.safe_load(str(meta)) if meta is not None else {}

    params = {}
    for name, value in entries.items():
        if not name.startswith(PARAM_PREFIX):
            raise CheckpointError(f"Checkpoint '{path}' has unknown entry '{name}'")
        params[name[len(PARAM_PREFIX) :]] = np.asarray(value, dtype=ad.DTYPE)
    return ParameterStore(params=params, metadata=metadata or {}, format_version=version)


def as_batch(batch, seq_len=None):
    """Return `batch` as a float64 (B, seq_len, 1) array.

    Accepts (B, seq_len) and (B, seq_len, 1) input.
    """
    x = np.asarray(batch, dtype=ad.DTYPE)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"Expected a (B, seq_len, 1) batch, got shape {x.shape}")
    if seq_len is not None and x.shape[1] != seq_len:
        raise ShapeError(f"Batch has {x.shape[1]} time steps, model expects {seq_len}")
    return x


def reconstruction_error(x, x_rec):
    """Mean squared difference per sample over time steps and features.

    1-D input is treated as a single sample and returns a float.
    """
    x = np.asarray(x, dtype=ad.DTYPE)
    x_rec = np.asarray(x_rec, dtype=ad.DTYPE)
    if x.shape != x_rec.shape:
        raise ShapeError(f"reconstruction_error: shapes differ: {x.shape} != {x_rec.shape}")
    sq = (x - x_rec) ** 2
    if sq.ndim <= 1:
        return float(sq.mean())
    return sq.mean(axis=tuple(range(1, sq.ndim)))


def average_reconstruction_error(model, dataset, batch_size=256):
    """Return RE_A: the mean per-sample reconstruction error of `dataset`.

    The per-sample errors are added with exact rounding (math.fsum), so the
    result does not depend on sample order.
    """
    values = getattr(dataset, "values", dataset)
    values = np.asarray(values, dtype=ad.DTYPE)
    if values.shape[0] == 0:
        raise DataError("Cannot compute the average reconstruction error of an empty set")
    errors = model.sample_errors(values, batch_size=batch_size)
    return math.fsum(errors.tolist()) / len(errors)


class ModelBase(ABC):
    """
    Common base class for all model families.

    Derived classes declare their parameters in :meth:`param_shapes` and
    their computation in :meth:`build`. They are looked up by
    :class:`~riskformer.model_manager.ModelManager` using
    :meth:`get_script_name`.
    Classes which names that begin with an underscore ('_') are ignored.
    """

    #: (str) Name used on the command line and in configs, e.g. 'tr-la'.
    #: Defaults to the lower-case class name without trailing `...Model`.
    _script_name = None

    #: (type) dataclass that holds the architecture hyperparameters
    spec_cls = None

    #: (str) 'autoencoder' or 'classifier'
    kind = "autoencoder"

    def __init__(self, spec, params=None, seed=0):
        check_arg(spec, self.spec_cls)
        spec.validate()
        self.spec = spec
        self.seed = seed
        self._shapes = self.param_shapes()
        if params is None:
            params = self.init_params(np.random.default_rng(seed))
        self.params = {}
        self.set_params(params)

    def __str__(self):
        return f"{self.get_script_name()}({len(self._shapes)} params, {self.num_weights():,} weights)"

    __repr__ = __str__

    @classmethod
    def get_script_name(cls):
        # Check `cls.__dict__`, so a derived class does not inherit the name
        if cls.__dict__.get("_script_name") is None:
            assert_always(cls.__name__.endswith("Model"))
            cls._script_name = cls.__name__[:-5].lower()
        return cls._script_name

    @classmethod
    @abstractmethod
    def from_config(cls, model_cfg, seq_len, seed=0):
        """Create an untrained instance from the `model` config section."""

    @abstractmethod
    def param_shapes(self):
        """Return an ordered dict {name: shape} of all trainable parameters."""

    @abstractmethod
    def build(self, nodes):
        """Return the output node computed from the `nodes` map.

        `nodes` holds one node per parameter name plus the batch under 'x'.
        """

    @property
    def seq_len(self):
        return self.spec.seq_len

    def init_params(self, rng):
        return {
            name: init_parameter(rng, name, shape) for name, shape in self._shapes.items()
        }

    def num_weights(self):
        return int(sum(int(np.prod(s)) for s in self._shapes.values()))

    def set_params(self, params):
        check_arg(params, dict)
        store = ParameterStore(params=params)
        store.check_names(self._shapes.keys())
        for name, shape in self._shapes.items():
            value = np.asarray(params[name], dtype=ad.DTYPE)
            if value.shape != tuple(shape):
                raise ShapeError(
                    f"{self.get_script_name()}: parameter '{name}' has shape "
                    f"{value.shape}, expected {tuple(shape)}"
                )
            self.params[name] = np.array(value, copy=True)

    def copy_params(self):
        return {name: value.copy() for name, value in self.params.items()}

    def _constant_nodes(self, x):
        nodes = {name: ad.constant(value, name) for name, value in self.params.items()}
        nodes["x"] = ad.constant(x, "x")
        return nodes

    def forward(self, batch):
        """Evaluate the model without recording gradients."""
        x = self.prepare_batch(batch)
        out = self.build(self._constant_nodes(x))
        if not np.all(np.isfinite(out.values)):
            raise NonFiniteError(
                f"{self.get_script_name()}: output contains NaN or Inf (produced by '{out.op}')"
            )
        return out.values

    def prepare_batch(self, batch):
        return as_batch(batch, self.seq_len)

    def loss(self, nodes):
        """Return the scalar training loss node (mean MSE against the input)."""
        return ad.mse(self.build(nodes), nodes["x"])

    def loss_graph(self):
        """Return a graph with output 'loss' over the parameters and 'x' (and 'y')."""

        def build_loss(nodes):
            return {"loss": self.loss(nodes)}

        return ad.Graph(build_loss, name=f"{self.get_script_name()}-loss")

    def training_inputs(self, x, y=None):
        inputs = dict(self.params)
        inputs["x"] = self.prepare_batch(x)
        return inputs

    def sample_errors(self, values, batch_size=256):
        """Per-sample reconstruction errors, evaluated in fixed-order batches."""
        check_arg(batch_size, int, batch_size >= 1)
        res = []
        for start in range(0, len(values), batch_size):
            x = self.prepare_batch(values[start : start + batch_size])
            res.append(reconstruction_error(x, self.forward(x)))
        return np.concatenate(res) if res else np.zeros(0, dtype=ad.DTYPE)

    def to_store(self, **extra_metadata):
        spec = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.spec).items()}
        metadata = {
            "model": self.get_script_name(),
            "spec": spec,
            "seed": self.seed,
        }
        metadata.update(extra_metadata)
        return ParameterStore(params=self.copy_params(), metadata=metadata)
