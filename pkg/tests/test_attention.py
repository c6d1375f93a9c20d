# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
import math

import numpy as np
import pytest

from riskformer import autodiff as ad
from riskformer.attention import (
    AttentionParams,
    build_causal_mask,
    build_full_mask,
    build_local_mask,
    build_mask,
    check_mask,
    local_window_bounds,
    multi_head_attention,
    scaled_dot_product_attention,
)
from riskformer.util import ShapeError


def random_params(rng, width, heads, head_dim):
    shapes = AttentionParams.shapes("attn", width, heads, head_dim)
    arrays = {name.split(".")[1]: rng.normal(scale=0.5, size=s) for name, s in shapes.items()}
    return AttentionParams(heads=heads, head_dim=head_dim, **arrays)


class TestMasks:
    def test_window_bounds(self):
        assert local_window_bounds(10, 58, 5) == (8, 13)
        assert local_window_bounds(0, 58, 5) == (0, 3)
        assert local_window_bounds(57, 58, 5) == (55, 58)
        with pytest.raises(IndexError):
            local_window_bounds(58, 58, 5)

    def test_local_mask(self):
        np.testing.assert_array_equal(build_local_mask(3, 1), np.eye(3, dtype=bool))
        assert build_local_mask(4, 7).all()
        assert np.flatnonzero(build_local_mask(5, 3)[2]).tolist() == [1, 2, 3]

    def test_local_mask_oracle(self):
        for seq_len in range(1, 21):
            for w in range(1, 10, 2):
                expected = np.zeros((seq_len, seq_len), dtype=bool)
                for i in range(seq_len):
                    for j in range(seq_len):
                        expected[i, j] = abs(i - j) <= w // 2
                mask = build_local_mask(seq_len, w)
                np.testing.assert_array_equal(mask, expected, err_msg=f"T={seq_len}, w={w}")
                for i in range(seq_len):
                    start, end = local_window_bounds(i, seq_len, w)
                    assert np.flatnonzero(mask[i]).tolist() == list(range(start, end))

    def test_causal_mask(self):
        np.testing.assert_array_equal(build_causal_mask(1), [[True]])
        mask = build_causal_mask(3)
        assert [np.flatnonzero(row).tolist() for row in mask] == [[0], [0, 1], [0, 1, 2]]

    def test_build_mask(self):
        np.testing.assert_array_equal(build_mask(4, "full"), build_full_mask(4))
        np.testing.assert_array_equal(build_mask(6, 3), build_local_mask(6, 3))

    def test_check_mask(self):
        check_mask(build_causal_mask(4), seq_len=4)
        with pytest.raises(ShapeError, match="square"):
            check_mask(np.ones((2, 3), dtype=bool))
        with pytest.raises(ShapeError, match="sequence length"):
            check_mask(np.ones((2, 2), dtype=bool), seq_len=3)
        bad = np.ones((3, 3), dtype=bool)
        bad[1] = False
        with pytest.raises(ShapeError, match=r"row\(s\) \[1\]"):
            check_mask(bad)


class TestScaledDotProduct:
    def test_singleton(self):
        out = scaled_dot_product_attention([[0.3]], [[-2.0]], [[7.0, 1.0]])
        np.testing.assert_allclose(out.values, [[7.0, 1.0]])

    def test_identical_keys(self):
        k = np.array([[1.0, 2.0], [1.0, 2.0]])
        v = np.array([[1.0, 0.0], [3.0, 4.0]])
        out = scaled_dot_product_attention(np.array([[0.5, -1.0], [2.0, 0.0]]), k, v)
        np.testing.assert_allclose(out.values, [[2.0, 2.0], [2.0, 2.0]])

    def test_blocked_entry(self):
        qkv = np.array([[1.0], [0.0], [-1.0]])
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 2] = False
        out = scaled_dot_product_attention(qkv, qkv, qkv, mask)
        assert out.values[0, 0] == pytest.approx(math.e / (math.e + 1.0), abs=1e-12)
        assert out.values[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match="K has 3 rows, V has 2"):
            scaled_dot_product_attention(np.ones((3, 2)), np.ones((3, 2)), np.ones((2, 2)))
        with pytest.raises(ShapeError, match="Q width"):
            scaled_dot_product_attention(np.ones((3, 2)), np.ones((3, 4)), np.ones((3, 2)))
        with pytest.raises(ShapeError, match="does not fit"):
            scaled_dot_product_attention(
                np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), build_full_mask(4)
            )


class TestMultiHead:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_single_head_identity(self):
        x = self.rng.normal(size=(6, 3))
        eye = np.eye(3)
        zero = np.zeros(3)
        params = AttentionParams(eye, zero, eye, zero, eye, zero, eye, zero, heads=1, head_dim=3)
        mask = build_local_mask(6, 3)
        out = multi_head_attention(x, params, mask)
        expected = scaled_dot_product_attention(x, x, x, mask)
        np.testing.assert_allclose(out.values, expected.values, atol=1e-12)

    def test_default_shape(self):
        params = random_params(self.rng, 25, 5, 5)
        out = multi_head_attention(self.rng.normal(size=(58, 25)), params, build_local_mask(58, 5))
        assert out.shape == (58, 25)
        out = multi_head_attention(self.rng.normal(size=(2, 58, 25)), params)
        assert out.shape == (2, 58, 25)

    def test_locality(self):
        T, w = 12, 3
        params = random_params(self.rng, 4, 2, 2)
        mask = build_local_mask(T, w)
        x = self.rng.normal(size=(1, T, 4))
        base = multi_head_attention(x, params, mask).values
        for j in (0, 5, 11):
            x2 = x.copy()
            x2[0, j] += self.rng.normal(scale=10.0, size=4)
            out = multi_head_attention(x2, params, mask).values
            for i in range(T):
                start, end = local_window_bounds(i, T, w)
                if not start <= j < end:
                    np.testing.assert_allclose(out[0, i], base[0, i], rtol=0, atol=1e-12)
                elif i == j:
                    assert not np.allclose(out[0, i], base[0, i])

    def test_full_window_equals_unmasked(self):
        T = 7
        params = random_params(self.rng, 4, 2, 2)
        x = self.rng.normal(size=(2, T, 4))
        masked = multi_head_attention(x, params, build_local_mask(T, 2 * T)).values
        full = multi_head_attention(x, params, build_full_mask(T)).values
        np.testing.assert_array_equal(masked, full)

    def test_width_mismatch(self):
        params = random_params(self.rng, 4, 2, 2)
        with pytest.raises(ShapeError):
            multi_head_attention(self.rng.normal(size=(5, 3)), params)
        with pytest.raises(ShapeError, match="expected"):
            multi_head_attention(self.rng.normal(size=(1, 1, 5, 4)), params)

    def test_gradients(self):
        T, width, heads, head_dim = 5, 4, 2, 2
        shapes = AttentionParams.shapes("attn", width, heads, head_dim)
        inputs = {name: self.rng.normal(scale=0.5, size=s) for name, s in shapes.items()}
        inputs["x"] = self.rng.normal(size=(2, T, width))
        weights = self.rng.normal(size=(2, T, width))
        mask = build_local_mask(T, 3)

        def build(nodes):
            params = AttentionParams.from_nodes(nodes, "attn", heads, head_dim)
            return ad.sum(ad.mul(multi_head_attention(nodes["x"], params, mask), weights))

        graph = ad.Graph(build)
        graph.forward_eval(inputs)
        grads = graph.backward()
        for name in inputs:
            fd = ad.finite_difference_gradient(graph, name, eps=1e-5)
            np.testing.assert_allclose(grads[name], fd, rtol=1e-5, atol=1e-7, err_msg=name)
