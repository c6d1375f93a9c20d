# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Scaled dot-product attention, the multi-head wrapper, and mask builders.

Masks are boolean (seq_len, seq_len) arrays: ``mask[i, j]`` is true if
position `i` may attend to position `j`.
"""
import math
from dataclasses import dataclass

import numpy as np

from riskformer import autodiff as ad
from riskformer.util import ShapeError, check_arg

#: Window value that selects unrestricted (full) self-attention
FULL_WINDOW = "full"


@dataclass
class AttentionParams:
    """Projection weights of one multi-head attention layer.

    Entries are ndarrays or :class:`~riskformer.autodiff.TensorNode` objects.
    Projection matrices have shape (width, heads * head_dim), except `wo`
    which maps (heads * head_dim, width).
    """

    wq: object
    bq: object
    wk: object
    bk: object
    wv: object
    bv: object
    wo: object
    bo: object
    heads: int = 1
    head_dim: int = 1

    NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __post_init__(self):
        check_arg(self.heads, int, self.heads >= 1)
        check_arg(self.head_dim, int, self.head_dim >= 1)

    @property
    def inner_width(self):
        return self.heads * self.head_dim

    @classmethod
    def from_nodes(cls, nodes, prefix, heads, head_dim):
        """Pick the `<prefix>.wq`, `<prefix>.bq`, ... entries of a name map."""
        kwargs = {name: nodes[f"{prefix}.{name}"] for name in cls.NAMES}
        return cls(heads=heads, head_dim=head_dim, **kwargs)

    @staticmethod
    def shapes(prefix, width, heads, head_dim):
        inner = heads * head_dim
        return {
            f"{prefix}.wq": (width, inner),
            f"{prefix}.bq": (inner,),
            f"{prefix}.wk": (width, inner),
            f"{prefix}.bk": (inner,),
            f"{prefix}.wv": (width, inner),
            f"{prefix}.bv": (inner,),
            f"{prefix}.wo": (inner, width),
            f"{prefix}.bo": (width,),
        }


def local_window_bounds(i, seq_len, w):
    """Return the half-open index range ``[start, end)`` position `i` attends to.

    start = max(0, i - w // 2), end = min(seq_len, i + w // 2 + 1)

    Raises:
        IndexError: if `i` is not a valid position
    """
    check_arg(seq_len, int, seq_len >= 1)
    check_arg(w, int, w >= 1)
    if not 0 <= i < seq_len:
        raise IndexError(f"Position {i} out of range for sequence length {seq_len}")
    half = w // 2
    return max(0, i - half), min(seq_len, i + half + 1)


def build_local_mask(seq_len, w):
    """Return a mask that restricts every position to its local window."""
    check_arg(seq_len, int, seq_len >= 1)
    check_arg(w, int, w >= 1)
    half = w // 2
    pos = np.arange(seq_len)
    start = np.maximum(0, pos - half)[:, None]
    end = np.minimum(seq_len, pos + half + 1)[:, None]
    cols = pos[None, :]
    return (cols >= start) & (cols < end)


def build_causal_mask(seq_len):
    """Return a lower-triangular mask (position `i` attends to `j <= i`)."""
    check_arg(seq_len, int, seq_len >= 1)
    return np.tri(seq_len, dtype=bool)


def build_full_mask(seq_len):
    check_arg(seq_len, int, seq_len >= 1)
    return np.ones((seq_len, seq_len), dtype=bool)


def build_mask(seq_len, window):
    """Return a local mask for an int `window`, or a full mask for 'full'."""
    if window == FULL_WINDOW:
        return build_full_mask(seq_len)
    return build_local_mask(seq_len, window)


def check_mask(mask, seq_len=None):
    """Raise ShapeError if `mask` is not square or has an all-blocked row."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ShapeError(f"Attention mask must be square, got {mask.shape}")
    if seq_len is not None and mask.shape[0] != seq_len:
        raise ShapeError(
            f"Attention mask is {mask.shape[0]}x{mask.shape[0]}, sequence length is {seq_len}"
        )
    blocked = np.flatnonzero(~mask.any(axis=1))
    if blocked.size:
        raise ShapeError(f"Attention mask blocks every position in row(s) {blocked.tolist()}")
    return mask


def _swap_last(node):
    axes = list(range(node.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(node, axes)


def scaled_dot_product_attention(q, k, v, mask=None):
    """softmax(Q K^T / sqrt(d_k)) V with blocked scores removed from the softmax.

    Args:
        q, k, v: arrays or nodes of shape (..., seq_len, d_k); `k` and `v`
            share their row count
        mask (ndarray, optional): (seq_len_q, seq_len_k) boolean mask
    Returns:
        TensorNode of shape (..., seq_len, d_v)
    """
    q, k, v = ad._wrap(q), ad._wrap(k), ad._wrap(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("scaled_dot_product_attention: Q, K, V must be 2-D or more")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"scaled_dot_product_attention: K has {k.shape[-2]} rows, V has {v.shape[-2]}"
        )
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"scaled_dot_product_attention: Q width {q.shape[-1]} != K width {k.shape[-1]}"
        )
    if mask is not None:
        mask = check_mask(mask)
        if mask.shape != (q.shape[-2], k.shape[-2]):
            raise ShapeError(
                f"scaled_dot_product_attention: mask {mask.shape} does not fit "
                f"{q.shape[-2]}x{k.shape[-2]} scores"
            )
    d_k = q.shape[-1]
    scores = ad.mul(ad.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d_k))
    weights = ad.softmax(scores, mask)
    return ad.matmul(weights, v)


def _split_heads(node, heads, head_dim):
    B, T, _ = node.shape
    return ad.transpose(ad.reshape(node, (B, T, heads, head_dim)), (0, 2, 1, 3))


def multi_head_attention(x, params, mask=None):
    """Multi-head self-attention.

    `heads` independent attention calculations over projected Q/K/V, with
    results concatenated in head order and output-projected.

    Args:
        x: (B, seq_len, width) or (seq_len, width)
        params (AttentionParams):
        mask (ndarray, optional): (seq_len, seq_len) boolean mask
    Returns:
        TensorNode with the shape of `x`
    """
    check_arg(params, AttentionParams)
    x = ad._wrap(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"multi_head_attention: expected (B, T, width) input, got {x.shape}")

    h, dk = params.heads, params.head_dim
    q = ad.add(ad.matmul(x, params.wq), params.bq)
    k = ad.add(ad.matmul(x, params.wk), params.bk)
    v = ad.add(ad.matmul(x, params.wv), params.bv)
    if q.shape[-1] != params.inner_width:
        raise ShapeError(
            f"multi_head_attention: projections give width {q.shape[-1]}, "
            f"expected heads * head_dim = {params.inner_width}"
        )
    out = scaled_dot_product_attention(
        _split_heads(q, h, dk), _split_heads(k, h, dk), _split_heads(v, h, dk), mask
    )
    B, _, T, _ = out.shape
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, params.inner_width))
    out = ad.add(ad.matmul(out, params.wo), params.bo)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out
