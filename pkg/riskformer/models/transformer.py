# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Transformer autoencoder with local (TR-LA) or full (TR-FU) encoder attention.

Encoder: dense 1 -> width, `encoder_blocks` local-attention blocks, mean
pooling over time, dense width -> latent_dim.

Decoder: dense latent_dim -> seq_len * width, reshape, `decoder_blocks`
causal-attention blocks, dense width -> 1.
"""
from dataclasses import dataclass, replace

import numpy as np

from riskformer import autodiff as ad
from riskformer.attention import (
    FULL_WINDOW,
    AttentionParams,
    build_causal_mask,
    build_mask,
    multi_head_attention,
)
from riskformer.models.base import ModelBase
from riskformer.util import ConfigurationError, ShapeError


@dataclass(frozen=True)
class TransformerAutoencoderSpec:
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    ffn_dim: int = 16
    heads: int = 5
    head_dim: int = 5
    latent_dim: int = 10
    window: object = 5
    use_layer_norm: bool = False
    positional_encoding: bool = False
    seq_len: int = 58

    @property
    def width(self):
        return self.heads * self.head_dim

    def validate(self):
        for name in (
            "encoder_blocks",
            "decoder_blocks",
            "ffn_dim",
            "heads",
            "head_dim",
            "latent_dim",
            "seq_len",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"model.{name} must be an integer >= 1, got {value!r}")
        if self.window != FULL_WINDOW and (
            isinstance(self.window, bool) or not isinstance(self.window, int) or self.window < 1
        ):
            raise ConfigurationError(
                f"model.window must be an integer >= 1 or '{FULL_WINDOW}', got {self.window!r}"
            )


def sinusoidal_encoding(seq_len, width):
    """Return the (seq_len, width) sine/cosine position table."""
    pos = np.arange(seq_len, dtype=ad.DTYPE)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerModel(ModelBase):
    """TR-LA: transformer autoencoder with local-attention encoder blocks."""

    _script_name = "tr-la"
    spec_cls = TransformerAutoencoderSpec

    def __init__(self, spec, params=None, seed=0):
        super().__init__(spec, params=params, seed=seed)
        self.encoder_mask = build_mask(spec.seq_len, spec.window)
        self.decoder_mask = build_causal_mask(spec.seq_len)
        self.position_table = (
            sinusoidal_encoding(spec.seq_len, spec.width) if spec.positional_encoding else None
        )

    @classmethod
    def from_config(cls, model_cfg, seq_len, seed=0):
        spec = TransformerAutoencoderSpec(
            encoder_blocks=model_cfg["encoder_blocks"],
            decoder_blocks=model_cfg["decoder_blocks"],
            ffn_dim=model_cfg["ffn_dim"],
            heads=model_cfg["heads"],
            head_dim=model_cfg["head_dim"],
            latent_dim=model_cfg["latent_dim"],
            window=model_cfg["window"],
            use_layer_norm=model_cfg["use_layer_norm"],
            positional_encoding=model_cfg["positional_encoding"],
            seq_len=seq_len,
        )
        return cls(spec, seed=seed)

    def _block_shapes(self, prefix):
        s = self.spec
        D = s.width
        shapes = AttentionParams.shapes(f"{prefix}.attn", D, s.heads, s.head_dim)
        if s.use_layer_norm:
            shapes[f"{prefix}.norm1.gamma"] = (D,)
            shapes[f"{prefix}.norm1.beta"] = (D,)
        shapes[f"{prefix}.ffn.w1"] = (D, s.ffn_dim)
        shapes[f"{prefix}.ffn.b1"] = (s.ffn_dim,)
        shapes[f"{prefix}.ffn.w2"] = (s.ffn_dim, D)
        shapes[f"{prefix}.ffn.b2"] = (D,)
        if s.use_layer_norm:
            shapes[f"{prefix}.norm2.gamma"] = (D,)
            shapes[f"{prefix}.norm2.beta"] = (D,)
        return shapes

    def param_shapes(self):
        s = self.spec
        D = s.width
        shapes = {"input.w": (1, D), "input.b": (D,)}
        for i in range(s.encoder_blocks):
            shapes.update(self._block_shapes(f"enc{i}"))
        shapes["latent.w"] = (D, s.latent_dim)
        shapes["latent.b"] = (s.latent_dim,)
        shapes["dec_in.w"] = (s.latent_dim, s.seq_len * D)
        shapes["dec_in.b"] = (s.seq_len * D,)
        for i in range(s.decoder_blocks):
            shapes.update(self._block_shapes(f"dec{i}"))
        shapes["output.w"] = (D, 1)
        shapes["output.b"] = (1,)
        return shapes

    def _block(self, nodes, prefix, h, mask):
        s = self.spec
        attn = AttentionParams.from_nodes(nodes, f"{prefix}.attn", s.heads, s.head_dim)
        h = ad.add(h, multi_head_attention(h, attn, mask))
        if s.use_layer_norm:
            h = ad.layer_norm(h, nodes[f"{prefix}.norm1.gamma"], nodes[f"{prefix}.norm1.beta"])
        f = ad.relu(ad.add(ad.matmul(h, nodes[f"{prefix}.ffn.w1"]), nodes[f"{prefix}.ffn.b1"]))
        f = ad.add(ad.matmul(f, nodes[f"{prefix}.ffn.w2"]), nodes[f"{prefix}.ffn.b2"])
        h = ad.add(h, f)
        if s.use_layer_norm:
            h = ad.layer_norm(h, nodes[f"{prefix}.norm2.gamma"], nodes[f"{prefix}.norm2.beta"])
        return h

    def _add_positions(self, h):
        if self.position_table is None:
            return h
        return ad.add(h, self.position_table)

    def encode_nodes(self, nodes, x):
        """Y = enc(X): (B, seq_len, 1) -> (B, latent_dim)."""
        if x.ndim != 3 or x.shape[1:] != (self.seq_len, 1):
            raise ShapeError(f"encode: expected (B, {self.seq_len}, 1) input, got {x.shape}")
        h = ad.add(ad.matmul(x, nodes["input.w"]), nodes["input.b"])
        h = self._add_positions(h)
        for i in range(self.spec.encoder_blocks):
            h = self._block(nodes, f"enc{i}", h, self.encoder_mask)
        pooled = ad.mean(h, axis=1)
        return ad.add(ad.matmul(pooled, nodes["latent.w"]), nodes["latent.b"])

    def decode_nodes(self, nodes, z):
        """X' = dec(Y): (B, latent_dim) -> (B, seq_len, 1)."""
        s = self.spec
        if z.ndim != 2 or z.shape[1] != s.latent_dim:
            raise ShapeError(f"decode: expected (B, {s.latent_dim}) latents, got {z.shape}")
        h = ad.add(ad.matmul(z, nodes["dec_in.w"]), nodes["dec_in.b"])
        h = ad.reshape(h, (z.shape[0], s.seq_len, s.width))
        h = self._add_positions(h)
        for i in range(s.decoder_blocks):
            h = self._block(nodes, f"dec{i}", h, self.decoder_mask)
        return ad.add(ad.matmul(h, nodes["output.w"]), nodes["output.b"])

    def build(self, nodes):
        return self.decode_nodes(nodes, self.encode_nodes(nodes, nodes["x"]))

    def encode(self, batch):
        x = self.prepare_batch(batch)
        nodes = self._constant_nodes(x)
        return self.encode_nodes(nodes, nodes["x"]).values

    def decode(self, latents):
        z = np.asarray(latents, dtype=ad.DTYPE)
        nodes = {name: ad.constant(value, name) for name, value in self.params.items()}
        return self.decode_nodes(nodes, ad.constant(z)).values


class FullAttentionTransformerModel(TransformerModel):
    """TR-FU: the transformer autoencoder with unrestricted encoder attention."""

    _script_name = "tr-fu"

    def __init__(self, spec, params=None, seed=0):
        spec = replace(spec, window=FULL_WINDOW)
        super().__init__(spec, params=params, seed=seed)


def encode(model, batch):
    """Return the (B, latent_dim) latent vectors of `batch`."""
    return model.encode(batch)


def decode(model, latents):
    """Return the (B, seq_len, 1) reconstructions of `latents`."""
    return model.decode(latents)
