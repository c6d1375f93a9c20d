# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Feed-forward classifier baseline (FF-NN).
"""
from dataclasses import dataclass

import numpy as np

from riskformer import autodiff as ad
from riskformer.models.base import ModelBase
from riskformer.util import ConfigurationError, ShapeError


@dataclass(frozen=True)
class FeedForwardSpec:
    hidden: tuple = (64, 64)
    seq_len: int = 58

    def validate(self):
        if not self.hidden or any(not isinstance(h, int) or h < 1 for h in self.hidden):
            raise ConfigurationError(
                f"model.ffnn_hidden must be positive integers, got {list(self.hidden)}"
            )
        if not isinstance(self.seq_len, int) or self.seq_len < 1:
            raise ConfigurationError(f"seq_len must be >= 1, got {self.seq_len!r}")


class FeedForwardModel(ModelBase):
    """FF-NN: tanh hidden layers and a single sigmoid output unit.

    Scores are probabilities of the positive (non-technical loss) class.
    Training minimizes binary cross-entropy against the 0/1 targets 'y'.
    """

    _script_name = "ff-nn"
    spec_cls = FeedForwardSpec
    kind = "classifier"

    @classmethod
    def from_config(cls, model_cfg, seq_len, seed=0):
        spec = FeedForwardSpec(hidden=tuple(model_cfg["ffnn_hidden"]), seq_len=seq_len)
        return cls(spec, seed=seed)

    def param_shapes(self):
        shapes = {}
        width = self.spec.seq_len
        for i, units in enumerate(self.spec.hidden):
            shapes[f"hidden{i}.w"] = (width, units)
            shapes[f"hidden{i}.b"] = (units,)
            width = units
        shapes["output.w"] = (width, 1)
        shapes["output.b"] = (1,)
        return shapes

    def prepare_batch(self, batch):
        x = np.asarray(batch, dtype=ad.DTYPE)
        if x.ndim == 3 and x.shape[2] == 1:
            x = x[:, :, 0]
        if x.ndim != 2 or x.shape[1] != self.seq_len:
            raise ShapeError(f"ffnn: expected (B, {self.seq_len}) input, got {x.shape}")
        return x

    def build(self, nodes):
        h = nodes["x"]
        for i in range(len(self.spec.hidden)):
            h = ad.tanh(ad.add(ad.matmul(h, nodes[f"hidden{i}.w"]), nodes[f"hidden{i}.b"]))
        logit = ad.add(ad.matmul(h, nodes["output.w"]), nodes["output.b"])
        return ad.reshape(ad.sigmoid(logit), (h.shape[0],))

    def loss(self, nodes):
        return ad.binary_cross_entropy(self.build(nodes), nodes["y"])

    def training_inputs(self, x, y=None):
        inputs = super().training_inputs(x)
        if y is None:
            raise ShapeError("ffnn: training needs 0/1 targets")
        inputs["y"] = np.asarray(y, dtype=ad.DTYPE)
        return inputs

    def score(self, values, batch_size=256):
        res = []
        for start in range(0, len(values), batch_size):
            res.append(self.forward(values[start : start + batch_size]))
        return np.concatenate(res) if res else np.zeros(0, dtype=ad.DTYPE)


def ffnn_score(model, batch):
    """Return per-sample positive-class probabilities in (0, 1)."""
    return model.forward(batch)
