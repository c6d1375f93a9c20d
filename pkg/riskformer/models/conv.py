# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
from dataclasses import dataclass

from riskformer import autodiff as ad
from riskformer.models.base import ModelBase
from riskformer.util import ConfigurationError


@dataclass(frozen=True)
class ConvAutoencoderSpec:
    """1-D convolutional autoencoder.

    The decoder uses transposed convolutions with the encoder's filter counts
    in reverse order; a final linear convolution maps back to one channel.
    """

    encoder_filters: tuple = (64, 32, 10)
    decoder_filters: tuple = (10, 32, 64)
    kernel_size: int = 3
    seq_len: int = 58

    def validate(self):
        if not isinstance(self.kernel_size, int) or self.kernel_size < 1:
            raise ConfigurationError(f"model.kernel_size must be >= 1, got {self.kernel_size!r}")
        if not isinstance(self.seq_len, int) or self.seq_len < 1:
            raise ConfigurationError(f"seq_len must be >= 1, got {self.seq_len!r}")
        if any(not isinstance(f, int) or f < 1 for f in self.encoder_filters):
            raise ConfigurationError(
                f"model.conv_filters must be positive integers, got {list(self.encoder_filters)}"
            )
        if tuple(self.decoder_filters) != tuple(reversed(self.encoder_filters)):
            raise ConfigurationError(
                f"Decoder filters {list(self.decoder_filters)} do not mirror "
                f"encoder filters {list(self.encoder_filters)}"
            )


class ConvModel(ModelBase):
    """CONV: convolutional autoencoder baseline (relu activations, same padding)."""

    _script_name = "conv"
    spec_cls = ConvAutoencoderSpec

    @classmethod
    def from_config(cls, model_cfg, seq_len, seed=0):
        filters = tuple(model_cfg["conv_filters"])
        spec = ConvAutoencoderSpec(
            encoder_filters=filters,
            decoder_filters=tuple(reversed(filters)),
            kernel_size=model_cfg["kernel_size"],
            seq_len=seq_len,
        )
        return cls(spec, seed=seed)

    def param_shapes(self):
        K = self.spec.kernel_size
        shapes = {}
        c_in = 1
        for i, c_out in enumerate(self.spec.encoder_filters):
            shapes[f"enc{i}.kernel"] = (K, c_in, c_out)
            shapes[f"enc{i}.bias"] = (c_out,)
            c_in = c_out
        for i, c_out in enumerate(self.spec.decoder_filters):
            shapes[f"dec{i}.kernel"] = (K, c_in, c_out)
            shapes[f"dec{i}.bias"] = (c_out,)
            c_in = c_out
        shapes["output.kernel"] = (K, c_in, 1)
        shapes["output.bias"] = (1,)
        return shapes

    def build(self, nodes):
        h = nodes["x"]
        for i in range(len(self.spec.encoder_filters)):
            h = ad.relu(ad.add(ad.conv1d(h, nodes[f"enc{i}.kernel"]), nodes[f"enc{i}.bias"]))
        for i in range(len(self.spec.decoder_filters)):
            h = ad.conv_transpose1d(h, nodes[f"dec{i}.kernel"])
            h = ad.relu(ad.add(h, nodes[f"dec{i}.bias"]))
        return ad.add(ad.conv1d(h, nodes["output.kernel"]), nodes["output.bias"])


def conv_forward(model, batch):
    """Return (B, seq_len, 1) reconstructions of `batch`."""
    return model.forward(batch)
