# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Training loops, training-subset sampling and the representativeness check.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np

from riskformer.models.base import average_reconstruction_error
from riskformer.optimizer import OptimizerState, adam_step
from riskformer.statistic_manager import StatisticManager
from riskformer.util import (
    ConfigurationError,
    DataError,
    NonFiniteError,
    NumericalError,
    check_arg,
    format_elap,
    logger,
)

#: Named training-subset sizes (None: all eligible series)
SUBSET_PRESETS = {"full": None, "100k": 100_000, "10k": 10_000}

#: Epoch counts used with `epochs: auto`
EPOCH_PRESETS = {"full": 20, "100k": 30, "10k": 80}

#: `epochs: auto` with an explicit subset count
DEFAULT_EPOCHS = 30


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigurationError(f"train.{name} must be an integer >= 1, got {value!r}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10_000
    micro_batch_size: int = 256
    seed: int = 42
    subset: object = "full"
    exclude_labeled: bool = True
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    eval_batch_size: int = 256
    negative_ratio: int = 10

    def __post_init__(self):
        _positive_int("epochs", self.epochs)
        _positive_int("batch_size", self.batch_size)
        _positive_int("micro_batch_size", self.micro_batch_size)
        _positive_int("eval_batch_size", self.eval_batch_size)
        _positive_int("ffnn_negative_ratio", self.negative_ratio)
        if self.subset not in SUBSET_PRESETS and (
            isinstance(self.subset, bool) or not isinstance(self.subset, int) or self.subset < 1
        ):
            raise ConfigurationError(
                f"train.subset must be one of {', '.join(SUBSET_PRESETS)} "
                f"or a count >= 1, got {self.subset!r}"
            )
        if not self.learning_rate > 0:
            raise ConfigurationError(f"train.learning_rate must be > 0, got {self.learning_rate}")

    @classmethod
    def from_config(cls, train_cfg, seed, classifier=False):
        """Build from the `train` config section, resolving `epochs: auto`."""
        subset = train_cfg["subset"]
        epochs = train_cfg["ffnn_epochs"] if classifier else train_cfg["epochs"]
        if epochs == "auto":
            epochs = EPOCH_PRESETS.get(subset, DEFAULT_EPOCHS)
        return cls(
            epochs=epochs,
            batch_size=train_cfg["batch_size"],
            micro_batch_size=train_cfg["micro_batch_size"],
            seed=seed,
            subset=subset,
            exclude_labeled=train_cfg["exclude_labeled"],
            learning_rate=float(train_cfg["learning_rate"]),
            beta1=float(train_cfg["beta1"]),
            beta2=float(train_cfg["beta2"]),
            epsilon=float(train_cfg["epsilon"]),
            eval_batch_size=train_cfg["eval_batch_size"],
            negative_ratio=train_cfg["ffnn_negative_ratio"],
        )

    def optimizer_state(self):
        return OptimizerState(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )


@dataclass
class TrainHistory:
    """Per-epoch mean training loss and wall-clock time."""

    losses: list = field(default_factory=list)
    epoch_times: list = field(default_factory=list)
    final_error: float = None
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.losses)

    def as_dict(self):
        """Serializable history without the wall-clock `epoch_times`."""
        return {
            "epochs": len(self.losses),
            "losses": [float(v) for v in self.losses],
            "final_error": None if self.final_error is None else float(self.final_error),
            "info": dict(self.info),
        }


def _values(dataset):
    return np.asarray(getattr(dataset, "values", dataset), dtype=np.float64)


def _labels(dataset, n):
    labels = getattr(dataset, "labels", None)
    if labels is None:
        return np.zeros(n, dtype=bool)
    return np.asarray(labels, dtype=bool)


def subset_size(subset, eligible):
    """Return the number of series requested by a `train.subset` value."""
    if subset in SUBSET_PRESETS:
        size = SUBSET_PRESETS[subset]
        # Presets larger than the data fall back to everything
        return eligible if size is None else min(size, eligible)
    return subset


def sample_training_subset(dataset, config):
    """Draw a uniform sample without replacement (sorted row indices).

    Labeled series are not eligible when `config.exclude_labeled` is set.

    Returns:
        dataset restricted to the sample (or an index array for plain arrays)
    Raises:
        DataError: if more series are requested than are eligible
    """
    check_arg(config, TrainConfig)
    n = len(_values(dataset))
    labels = _labels(dataset, n)
    eligible = np.flatnonzero(~labels) if config.exclude_labeled else np.arange(n)
    size = subset_size(config.subset, len(eligible))
    if size > len(eligible):
        raise DataError(
            f"Requested a training subset of {size:,} series, "
            f"but only {len(eligible):,} are eligible"
        )
    if size == len(eligible):
        index = eligible
    else:
        rng = np.random.default_rng(config.seed)
        index = np.sort(rng.choice(eligible, size=size, replace=False))
    logger.info(f"Training subset: {len(index):,} of {n:,} series ({len(eligible):,} eligible)")
    if hasattr(dataset, "subset"):
        return dataset.subset(index)
    return index


def _fit(model, x, y, config, stats, label):
    """Mini-batch Adam on the model's loss graph.

    Every batch is evaluated in micro-batches whose gradients are weighted by
    their share of the batch and added in micro-batch order.
    """
    stats = stats or StatisticManager()
    graph = model.loss_graph()
    state = config.optimizer_state()
    rng = np.random.default_rng(config.seed)
    n = len(x)
    history = TrainHistory()
    names = list(model.params.keys())

    for epoch in range(1, config.epochs + 1):
        start = time.monotonic()
        perm = rng.permutation(n)
        batch_losses = []
        for b_idx, b_start in enumerate(range(0, n, config.batch_size), 1):
            batch = perm[b_start : b_start + config.batch_size]
            grads = {name: np.zeros_like(model.params[name]) for name in names}
            parts = []
            for m_start in range(0, len(batch), config.micro_batch_size):
                micro = batch[m_start : m_start + config.micro_batch_size]
                weight = len(micro) / len(batch)
                inputs = model.training_inputs(x[micro], None if y is None else y[micro])
                try:
                    loss = float(graph.forward_eval(inputs)["loss"])
                except NonFiniteError:
                    raise NumericalError(
                        f"{label}: non-finite loss in epoch {epoch}, batch {b_idx}"
                    ) from None
                micro_grads = graph.backward("loss", seed=weight)
                for name in names:
                    grads[name] += micro_grads[name]
                parts.append(weight * loss)
            batch_loss = math.fsum(parts)
            params, state = adam_step(model.params, grads, state)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise NumericalError(
                    f"{label}: non-finite parameters after epoch {epoch}, batch {b_idx}"
                )
            model.params = params
            batch_losses.append(batch_loss * len(batch))
            logger.debug(f"{label}: epoch {epoch} batch {b_idx}: loss {batch_loss:.6g}")

        elap = time.monotonic() - start
        epoch_loss = math.fsum(batch_losses) / n
        history.losses.append(epoch_loss)
        history.epoch_times.append(elap)
        stats.add_timing("train.epoch", elap)
        logger.info(
            f"{label}: epoch {epoch}/{config.epochs}: loss {epoch_loss:.6g} ({format_elap(elap)})"
        )
    stats.set_value("train.steps", state.step)
    return history


def train_autoencoder(model, dataset, config, eval_dataset=None, stats=None):
    """Minimize the mean reconstruction MSE over `dataset`.

    Labeled series are dropped first when `config.exclude_labeled` is set.

    Returns:
        (model, TrainHistory)
    Raises:
        NumericalError: on a non-finite loss (names epoch and batch)
    """
    check_arg(config, TrainConfig)
    x = _values(dataset)
    labels = _labels(dataset, len(x))
    if config.exclude_labeled and labels.any():
        logger.info(f"Excluding {int(labels.sum()):,} labeled series from training")
        x = x[~labels]
    if len(x) == 0:
        raise DataError("Training set is empty")
    x = model.prepare_batch(x)

    history = _fit(model, x, None, config, stats, model.get_script_name())
    history.info["train_size"] = len(x)
    if eval_dataset is not None:
        history.final_error = average_reconstruction_error(
            model, eval_dataset, batch_size=config.eval_batch_size
        )
        logger.info(f"Average reconstruction error: {history.final_error:.6g}")
    return model, history


def ffnn_training_set(dataset, labels, fraction, config):
    """Return (x, y) for the FF-NN: positives from `labels`, negatives unlabeled.

    The set holds floor(fraction * |labeled|) positives and is filled with
    unlabeled series up to `negative_ratio` times the labeled count.
    """
    if isinstance(fraction, bool) or not isinstance(fraction, (int, float)):
        raise ConfigurationError(f"FF-NN fraction must be a number, got {fraction!r}")
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"FF-NN fraction must be in (0, 1], got {fraction}")
    x = _values(dataset)
    ids = np.asarray(getattr(dataset, "account_ids", np.arange(len(x)).astype(str)))
    if labels is None:
        is_labeled = _labels(dataset, len(x))
    else:
        is_labeled = np.isin(ids, list(labels))
    labeled = np.flatnonzero(is_labeled)
    unlabeled = np.flatnonzero(~is_labeled)
    if len(labeled) == 0:
        raise DataError("FF-NN training needs labeled series")

    n_pos = int(math.floor(fraction * len(labeled)))
    n_total = config.negative_ratio * len(labeled)
    n_neg = n_total - n_pos
    if n_pos < 1:
        raise DataError(f"Fraction {fraction} of {len(labeled)} labeled series is empty")
    if n_neg > len(unlabeled):
        raise DataError(
            f"FF-NN needs {n_neg:,} unlabeled series, only {len(unlabeled):,} available"
        )
    rng = np.random.default_rng(config.seed)
    pos = np.sort(rng.choice(labeled, size=n_pos, replace=False))
    neg = np.sort(rng.choice(unlabeled, size=n_neg, replace=False))
    index = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return x[index], y


def train_ffnn(model, dataset, labels, fraction, config, stats=None):
    """Train the FF-NN classifier on binary cross-entropy.

    Returns:
        (model, TrainHistory)
    """
    check_arg(config, TrainConfig)
    x, y = ffnn_training_set(dataset, labels, fraction, config)
    x = model.prepare_batch(x)
    history = _fit(model, x, y, config, stats, model.get_script_name())
    history.info.update(
        {"train_size": len(y), "positives": int(y.sum()), "fraction": float(fraction)}
    )
    return model, history


@dataclass
class RepresentativenessResult:
    re_full: float
    re_subset: float
    delta: float
    threshold: float
    representative: bool
    two_sided: bool = False

    def as_dict(self):
        return {
            "re_full": float(self.re_full),
            "re_subset": float(self.re_subset),
            "delta": float(self.delta),
            "threshold": float(self.threshold),
            "representative": bool(self.representative),
            "two_sided": bool(self.two_sided),
        }


def representativeness_delta(
    model_factory, subset, dataset, config, threshold, two_sided=False, stats=None
):
    """Check whether `subset` is representative of `dataset`.

    Trains one fresh model on each set (same seed), evaluates both on
    `dataset` and compares delta = RE(full, full) - RE(subset, full) to
    `threshold`. With `two_sided`, |delta| is compared, so a subset whose model
    reconstructs `dataset` much worse than the full model is rejected too.

    Args:
        model_factory (callable): returns a fresh, identically initialized model
        subset (NormalizedDataset): D_s, a subset of `dataset`
        dataset (NormalizedDataset): D_w
        config (TrainConfig):
        threshold (float): case-dependent tolerance t
        two_sided (bool): compare |delta| instead of delta
    Raises:
        DataError: if `subset` has accounts that `dataset` lacks
    """
    check_arg(threshold, (int, float))
    missing = set(np.asarray(subset.account_ids).tolist()).difference(
        np.asarray(dataset.account_ids).tolist()
    )
    if missing:
        raise DataError(f"Subset is not part of the full set ({len(missing):,} foreign accounts)")

    full_model, _ = train_autoencoder(model_factory(), dataset, config, stats=stats)
    re_full = average_reconstruction_error(full_model, dataset, config.eval_batch_size)
    sub_model, _ = train_autoencoder(model_factory(), subset, config, stats=stats)
    re_subset = average_reconstruction_error(sub_model, dataset, config.eval_batch_size)

    delta = re_full - re_subset
    res = RepresentativenessResult(
        re_full=re_full,
        re_subset=re_subset,
        delta=delta,
        threshold=float(threshold),
        representative=bool((abs(delta) if two_sided else delta) < threshold),
        two_sided=bool(two_sided),
    )
    logger.info(
        f"RE(full)={re_full:.6g}, RE(subset)={re_subset:.6g}, delta={delta:.3g} "
        f"-> {'representative' if res.representative else 'not representative'} "
        f"(t={threshold}{', two-sided' if two_sided else ''})"
    )
    return res
