# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
from dataclasses import replace

import numpy as np
import pytest

from riskformer import autodiff as ad
from riskformer.models.base import (
    ParameterStore,
    average_reconstruction_error,
    load_checkpoint,
    reconstruction_error,
    save_checkpoint,
)
from riskformer.models.conv import ConvAutoencoderSpec, ConvModel, conv_forward
from riskformer.models.ffnn import FeedForwardModel, FeedForwardSpec, ffnn_score
from riskformer.models.transformer import (
    FullAttentionTransformerModel,
    TransformerAutoencoderSpec,
    TransformerModel,
    decode,
    encode,
)
from riskformer.util import CheckpointError, ConfigurationError, ShapeError

TOY_SPEC = TransformerAutoencoderSpec(
    encoder_blocks=1,
    decoder_blocks=2,
    ffn_dim=3,
    heads=2,
    head_dim=2,
    latent_dim=2,
    window=3,
    seq_len=6,
)


def zero_params(model):
    return {name: np.zeros(shape) for name, shape in model.param_shapes().items()}


class _ConstantModel(TransformerModel):
    """Reconstructs every sample as the constant `level`."""

    _script_name = "_constant"

    def __init__(self, spec, level):
        super().__init__(spec)
        self.level = level

    def forward(self, batch):
        return np.full(self.prepare_batch(batch).shape, self.level)


class TestReconstructionError:
    def test_examples(self):
        assert reconstruction_error([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert reconstruction_error([1.0, 0.0], [0.0, 0.0]) == 0.5
        assert reconstruction_error([0.2, 0.4, 0.4], [0.2, 0.3, 0.5]) == pytest.approx(
            0.02 / 3, abs=1e-12
        )
        errors = reconstruction_error(np.ones((2, 3, 1)), np.zeros((2, 3, 1)))
        np.testing.assert_array_equal(errors, [1.0, 1.0])
        with pytest.raises(ShapeError):
            reconstruction_error([1.0], [1.0, 2.0])

    def test_average(self):
        spec = TransformerAutoencoderSpec(
            encoder_blocks=1, decoder_blocks=1, heads=1, head_dim=1, seq_len=2
        )
        model = _ConstantModel(spec, 0.0)
        # per-sample errors 0.1 and 0.3
        data = np.array([[np.sqrt(0.1), np.sqrt(0.1)], [np.sqrt(0.3), np.sqrt(0.3)]])
        assert average_reconstruction_error(model, data[:1]) == pytest.approx(0.1, abs=1e-12)
        assert average_reconstruction_error(model, data) == pytest.approx(0.2, abs=1e-12)

    def test_order_invariance(self, rng):
        model = TransformerModel(TOY_SPEC, seed=1)
        data = rng.random((40, TOY_SPEC.seq_len))
        a = average_reconstruction_error(model, data, batch_size=7)
        b = average_reconstruction_error(model, data[rng.permutation(40)], batch_size=16)
        assert a == pytest.approx(b, abs=1e-12)


class TestTransformer:
    def setup_method(self):
        self.rng = np.random.default_rng(3)

    def test_spec(self):
        spec = TransformerAutoencoderSpec()
        assert spec.width == 25
        assert spec.seq_len == 58
        with pytest.raises(ConfigurationError, match="model.heads"):
            TransformerModel(TransformerAutoencoderSpec(heads=0))
        with pytest.raises(ConfigurationError, match="model.window"):
            TransformerModel(TransformerAutoencoderSpec(window="wide"))

    def test_default_shapes(self):
        model = TransformerModel(TransformerAutoencoderSpec(encoder_blocks=1, decoder_blocks=1))
        batch = self.rng.random((1, 58))
        assert encode(model, batch).shape == (1, 10)
        assert model.forward(batch).shape == (1, 58, 1)
        assert model.get_script_name() == "tr-la"
        assert "enc0.attn.wq" in model.params
        assert model.params["dec_in.w"].shape == (10, 58 * 25)

    def test_zero_weights(self):
        model = TransformerModel(TOY_SPEC)
        model.set_params(zero_params(model))
        z = encode(model, np.zeros((2, TOY_SPEC.seq_len)))
        np.testing.assert_array_equal(z, np.zeros((2, TOY_SPEC.latent_dim)))
        np.testing.assert_array_equal(decode(model, z), np.zeros((2, TOY_SPEC.seq_len, 1)))
        x = self.rng.random((3, TOY_SPEC.seq_len))
        np.testing.assert_array_equal(model.forward(x), np.zeros((3, TOY_SPEC.seq_len, 1)))
        errors = model.sample_errors(x)
        np.testing.assert_allclose(errors, (x**2).mean(axis=1))

    def test_deterministic_init(self):
        a = TransformerModel(TOY_SPEC, seed=5)
        b = TransformerModel(TOY_SPEC, seed=5)
        c = TransformerModel(TOY_SPEC, seed=6)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)

    def test_full_attention_degeneration(self):
        local = TransformerModel(replace(TOY_SPEC, window=12))
        full = FullAttentionTransformerModel(TOY_SPEC, params=local.copy_params())
        assert full.get_script_name() == "tr-fu"
        assert full.spec.window == "full"
        assert local.encoder_mask.all()
        x = self.rng.random((4, TOY_SPEC.seq_len))
        np.testing.assert_array_equal(local.forward(x), full.forward(x))

    def test_full_attention_degeneration_draws(self):
        spec = replace(TOY_SPEC, window=2 * TOY_SPEC.seq_len)
        for seed in range(50):
            local = TransformerModel(spec, seed=seed)
            full = FullAttentionTransformerModel(TOY_SPEC, params=local.copy_params())
            x = np.random.default_rng(seed).random((3, TOY_SPEC.seq_len))
            np.testing.assert_array_equal(local.forward(x), full.forward(x), err_msg=f"{seed}")

    def test_local_differs_from_full(self):
        local = TransformerModel(TOY_SPEC, seed=2)
        full = FullAttentionTransformerModel(TOY_SPEC, params=local.copy_params())
        x = self.rng.random((2, TOY_SPEC.seq_len))
        assert not np.allclose(local.forward(x), full.forward(x))

    def test_causal_decoder(self):
        model = TransformerModel(TOY_SPEC, seed=4)
        nodes = {name: ad.constant(v) for name, v in model.params.items()}
        T, D = TOY_SPEC.seq_len, TOY_SPEC.width

        def decoder_blocks(h0):
            h = ad.constant(h0)
            for i in range(TOY_SPEC.decoder_blocks):
                h = model._block(nodes, f"dec{i}", h, model.decoder_mask)
            return ad.add(ad.matmul(h, nodes["output.w"]), nodes["output.b"]).values

        h0 = self.rng.normal(size=(2, T, D))
        base = decoder_blocks(h0)
        for t in range(T - 1):
            h1 = h0.copy()
            h1[:, t + 1 :, :] += self.rng.normal(scale=5.0, size=(2, T - t - 1, D))
            out = decoder_blocks(h1)
            np.testing.assert_allclose(out[:, : t + 1], base[:, : t + 1], rtol=0, atol=1e-12)
            assert not np.allclose(out[:, t + 1 :], base[:, t + 1 :])

    def test_positional_encoding(self):
        spec = replace(TOY_SPEC, positional_encoding=True)
        model = TransformerModel(spec, seed=1)
        assert model.position_table.shape == (TOY_SPEC.seq_len, TOY_SPEC.width)
        plain = TransformerModel(TOY_SPEC, params=model.copy_params())
        x = self.rng.random((1, TOY_SPEC.seq_len))
        assert not np.allclose(model.forward(x), plain.forward(x))

    def test_shape_errors(self):
        model = TransformerModel(TOY_SPEC)
        with pytest.raises(ShapeError, match="model expects 6"):
            model.forward(np.zeros((1, 5)))
        with pytest.raises(ShapeError, match="decode"):
            model.decode(np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            model.set_params({**model.params, "input.w": np.zeros((2, 4))})
        with pytest.raises(CheckpointError, match="missing parameters: output.b"):
            params = model.copy_params()
            del params["output.b"]
            model.set_params(params)

    @pytest.mark.parametrize("use_layer_norm", [False, True])
    def test_gradients(self, use_layer_norm):
        spec = TransformerAutoencoderSpec(
            encoder_blocks=1,
            decoder_blocks=1,
            ffn_dim=3,
            heads=1,
            head_dim=3,
            latent_dim=2,
            window=3,
            use_layer_norm=use_layer_norm,
            seq_len=4,
        )
        model = TransformerModel(spec, seed=11)
        graph = model.loss_graph()
        inputs = model.training_inputs(self.rng.random((3, 4)))
        graph.forward_eval(inputs)
        grads = graph.backward("loss")
        names = ["input.w", "enc0.attn.wq", "enc0.ffn.w1", "latent.w", "dec_in.w", "dec0.attn.wv"]
        if use_layer_norm:
            names += ["enc0.norm1.gamma", "dec0.norm2.beta"]
        for name in names + ["output.w", "output.b"]:
            fd = ad.finite_difference_gradient(graph, name, eps=1e-5, output="loss")
            np.testing.assert_allclose(grads[name], fd, rtol=1e-4, atol=1e-8, err_msg=name)

    @pytest.mark.slow
    def test_gradients_all_params(self):
        spec = TransformerAutoencoderSpec(
            encoder_blocks=1,
            decoder_blocks=1,
            ffn_dim=3,
            heads=1,
            head_dim=3,
            latent_dim=2,
            window=3,
            seq_len=4,
        )
        for trial in range(100):
            model = TransformerModel(spec, seed=trial)
            graph = model.loss_graph()
            inputs = model.training_inputs(np.random.default_rng(trial).random((2, 4)))
            graph.forward_eval(inputs)
            grads = graph.backward("loss")
            for name in model.params:
                fd = ad.finite_difference_gradient(graph, name, eps=1e-5, output="loss")
                np.testing.assert_allclose(
                    grads[name], fd, rtol=1e-4, atol=1e-8, err_msg=f"{trial}: {name}"
                )


class TestConv:
    def test_shapes(self, rng):
        model = ConvModel(ConvAutoencoderSpec(encoder_filters=(8, 4), decoder_filters=(4, 8)))
        assert conv_forward(model, rng.random((3, 58))).shape == (3, 58, 1)
        assert model.params["enc0.kernel"].shape == (3, 1, 8)
        assert model.params["dec1.kernel"].shape == (3, 4, 8)
        assert model.params["output.kernel"].shape == (3, 8, 1)

    def test_zero_weights(self, rng):
        model = ConvModel(ConvAutoencoderSpec(encoder_filters=(4,), decoder_filters=(4,)))
        model.set_params(zero_params(model))
        np.testing.assert_array_equal(conv_forward(model, rng.random((2, 58))), 0.0)

    def test_identity_kernel(self, rng):
        spec = ConvAutoencoderSpec(encoder_filters=(), decoder_filters=(), seq_len=10)
        model = ConvModel(spec)
        model.set_params(
            {"output.kernel": np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1), "output.bias": [0.0]}
        )
        x = rng.random((2, 10))
        np.testing.assert_array_equal(conv_forward(model, x)[:, :, 0], x)

    def test_spec_errors(self):
        with pytest.raises(ConfigurationError, match="do not mirror"):
            ConvModel(ConvAutoencoderSpec(encoder_filters=(4, 2), decoder_filters=(4, 2)))
        with pytest.raises(ConfigurationError, match="kernel_size"):
            ConvModel(ConvAutoencoderSpec(kernel_size=0))

    def test_gradients(self, rng):
        spec = ConvAutoencoderSpec(encoder_filters=(3, 2), decoder_filters=(2, 3), seq_len=7)
        model = ConvModel(spec, seed=8)
        graph = model.loss_graph()
        graph.forward_eval(model.training_inputs(rng.random((2, 7))))
        grads = graph.backward("loss")
        for name in ("enc0.kernel", "enc1.bias", "dec0.kernel", "output.kernel"):
            fd = ad.finite_difference_gradient(graph, name, eps=1e-5, output="loss")
            np.testing.assert_allclose(grads[name], fd, rtol=1e-4, atol=1e-8, err_msg=name)


class TestFeedForward:
    def test_zero_weights(self, rng):
        model = FeedForwardModel(FeedForwardSpec(hidden=(4,), seq_len=5))
        model.set_params(zero_params(model))
        np.testing.assert_array_equal(ffnn_score(model, rng.random((3, 5))), [0.5, 0.5, 0.5])

    def test_bias_monotone(self, rng):
        model = FeedForwardModel(FeedForwardSpec(hidden=(4,), seq_len=5), seed=2)
        x = rng.random((4, 5))
        before = ffnn_score(model, x)
        params = model.copy_params()
        params["output.b"] = params["output.b"] + 1.0
        model.set_params(params)
        after = ffnn_score(model, x)
        assert np.all(after > before)
        assert np.all((after > 0) & (after < 1))

    def test_loss_needs_targets(self, rng):
        model = FeedForwardModel(FeedForwardSpec(hidden=(4,), seq_len=5))
        assert model.kind == "classifier"
        with pytest.raises(ShapeError, match="targets"):
            model.training_inputs(rng.random((2, 5)))

    def test_gradients(self, rng):
        model = FeedForwardModel(FeedForwardSpec(hidden=(4, 3), seq_len=5), seed=3)
        graph = model.loss_graph()
        graph.forward_eval(model.training_inputs(rng.random((6, 5)), [0, 1, 0, 1, 1, 0]))
        grads = graph.backward("loss")
        for name in ("hidden0.w", "hidden1.b", "output.w", "output.b"):
            fd = ad.finite_difference_gradient(graph, name, eps=1e-5, output="loss")
            np.testing.assert_allclose(grads[name], fd, rtol=1e-5, atol=1e-9, err_msg=name)


class TestCheckpoint:
    def setup_method(self):
        self.model = TransformerModel(TOY_SPEC, seed=9)

    def test_roundtrip(self, tmp_path):
        path = str(tmp_path / "model.npz")
        save_checkpoint(self.model.to_store(note="x"), path)
        store = load_checkpoint(path)
        assert store.metadata["model"] == "tr-la"
        assert store.metadata["note"] == "x"
        assert store.metadata["spec"]["window"] == 3
        assert set(store.names()) == set(self.model.params)
        for name, value in self.model.params.items():
            assert store[name].dtype == np.float64
            np.testing.assert_array_equal(store[name], value)

    def test_mismatched_spec(self, tmp_path):
        path = str(tmp_path / "model.npz")
        save_checkpoint(self.model.to_store(), path)
        store = load_checkpoint(path)
        other = TransformerModel(
            replace(TOY_SPEC, decoder_blocks=1, encoder_blocks=2)
        )
        with pytest.raises(CheckpointError, match="missing parameters: enc1.attn.wq") as exc:
            other.set_params(store.params)
        assert "unexpected parameters: dec1.attn.wq" in str(exc.value)

    def test_format_errors(self, tmp_path):
        path = str(tmp_path / "bad.npz")
        with open(path, "wb") as f:
            np.savez(f, **{"param/w": np.zeros(2)})
        with pytest.raises(CheckpointError, match="no format version"):
            load_checkpoint(path)
        with open(path, "wb") as f:
            np.savez(f, __format_version__=np.array(99))
        with pytest.raises(CheckpointError, match="format version 99"):
            load_checkpoint(path)
        with open(path, "wb") as f:
            np.savez(f, __format_version__=np.array(1), junk=np.zeros(1))
        with pytest.raises(CheckpointError, match="unknown entry 'junk'"):
            load_checkpoint(path)
        with open(path, "wb") as f:
            f.write(b"not a zip file")
        with pytest.raises(CheckpointError, match="Corrupt"):
            load_checkpoint(path)
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(str(tmp_path / "missing.npz"))

    def test_store_checks(self):
        store = ParameterStore(params={"a": np.zeros(2)})
        store.check_names(["a"])
        store.check_shapes({"a": (2,)})
        with pytest.raises(CheckpointError, match="shape mismatch"):
            store.check_shapes({"a": (3,)})
