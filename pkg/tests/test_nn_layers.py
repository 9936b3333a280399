"""Finite-difference gradient checks and layer behavior tests."""

import numpy as np
import pytest

from tactile_pose import nn
from tactile_pose.nn.layers import (
    ActivationSpec,
    BatchNormSpec,
    Conv3x3Spec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    LinearOutputSpec,
    MaxPool2x2Spec,
)

GRAD_TOL = 1e-5
FD_STEP = 1e-6


def scalar_loss(model, x, proj, seed=123):
    """Deterministic scalar readout: sum(forward(x) * proj)."""
    model.seed_dropout(seed)
    y = model.forward(x, training=True)
    return float(np.sum(y * proj)), y


def check_gradients(model, x, seed=123):
    """Compare backward() gradients against central finite differences."""
    rng = np.random.default_rng(99)
    model.seed_dropout(seed)
    y = model.forward(x, training=True)
    proj = rng.normal(size=y.shape)
    model.backward(proj)
    analytic = {
        (i, name): layer.grads[name].copy()
        for i, layer in enumerate(model.layers)
        for name in layer.params
    }

    worst = 0.0
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params.items():
            flat = arr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + FD_STEP
                lp, _ = scalar_loss(model, x, proj, seed)
                flat[j] = orig - FD_STEP
                lm, _ = scalar_loss(model, x, proj, seed)
                flat[j] = orig
                numeric = (lp - lm) / (2 * FD_STEP)
                a = analytic[(i, name)].reshape(-1)[j]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
                worst = max(worst, rel)
                assert rel < GRAD_TOL, (
                    f"layer {i} ({type(layer).__name__}) {name}[{j}]: "
                    f"analytic {a} vs numeric {numeric} (rel {rel:.2e})"
                )
    return worst


def check_input_gradient(model, x, seed=123):
    """Check d(loss)/d(input) through the whole chain via a leading identity."""
    rng = np.random.default_rng(98)
    model.seed_dropout(seed)
    y = model.forward(x, training=True)
    proj = rng.normal(size=y.shape)

    # Analytic input gradient: run backward and capture at the first layer.
    model.backward(proj)
    if hasattr(model.layers[0], "need_input_grad"):
        model.layers[0].need_input_grad = True
    dy = proj
    for layer in reversed(model.layers):
        dy = layer.backward(dy)
    dx = dy

    flat = x.reshape(-1)
    worst = 0.0
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + FD_STEP
        lp, _ = scalar_loss(model, x, proj, seed)
        flat[j] = orig - FD_STEP
        lm, _ = scalar_loss(model, x, proj, seed)
        flat[j] = orig
        numeric = (lp - lm) / (2 * FD_STEP)
        a = dx.reshape(-1)[j]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        worst = max(worst, rel)
        assert rel < GRAD_TOL, f"input[{j}]: analytic {a} vs numeric {numeric}"
    return worst


def make_model(specs, input_shape, seed=0):
    return nn.build_model(specs, input_shape, seed=seed)


class TestGradients:
    def test_conv_gradients(self):
        model = make_model([Conv3x3Spec(3)], (2, 6, 6), seed=1)
        x = np.random.default_rng(2).normal(size=(2, 2, 6, 6))
        check_gradients(model, x)
        check_input_gradient(model, x)

    def test_dense_gradients(self):
        model = make_model([DenseSpec(4)], (5,), seed=1)
        x = np.random.default_rng(3).normal(size=(3, 5))
        check_gradients(model, x)
        check_input_gradient(model, x)

    def test_linear_output_gradients(self):
        model = make_model([LinearOutputSpec(3)], (4,), seed=1)
        x = np.random.default_rng(4).normal(size=(2, 4))
        check_gradients(model, x)

    def test_relu_gradients(self):
        model = make_model([DenseSpec(6), ActivationSpec("relu")], (4,), seed=2)
        x = np.random.default_rng(5).normal(size=(3, 4)) + 0.05
        check_gradients(model, x)

    def test_elu_gradients(self):
        model = make_model([DenseSpec(6), ActivationSpec("elu")], (4,), seed=2)
        x = np.random.default_rng(6).normal(size=(3, 4))
        check_gradients(model, x)
        check_input_gradient(model, x)

    def test_maxpool_gradients(self):
        model = make_model([MaxPool2x2Spec()], (2, 6, 6), seed=0)
        x = np.random.default_rng(7).normal(size=(2, 2, 6, 6))
        check_input_gradient(model, x)

    def test_maxpool_odd_size_gradients(self):
        model = make_model([MaxPool2x2Spec()], (1, 5, 7), seed=0)
        x = np.random.default_rng(8).normal(size=(2, 1, 5, 7))
        check_input_gradient(model, x)

    def test_batchnorm_gradients_4d(self):
        model = make_model([BatchNormSpec()], (3, 4, 4), seed=0)
        x = np.random.default_rng(9).normal(size=(4, 3, 4, 4))
        check_gradients(model, x)
        check_input_gradient(model, x)

    def test_batchnorm_gradients_2d(self):
        model = make_model([BatchNormSpec()], (5,), seed=0)
        x = np.random.default_rng(10).normal(size=(6, 5))
        check_gradients(model, x)

    def test_dropout_gradients(self):
        model = make_model([DropoutSpec(0.4), DenseSpec(3)], (6,), seed=0)
        x = np.random.default_rng(11).normal(size=(4, 6))
        check_gradients(model, x)

    def test_composite_network_gradients(self):
        # 2 conv blocks + 1 dense hidden layer, all regularizer layers present.
        specs = [
            Conv3x3Spec(3), BatchNormSpec(), ActivationSpec("relu"), MaxPool2x2Spec(),
            Conv3x3Spec(4), BatchNormSpec(), ActivationSpec("elu"), MaxPool2x2Spec(),
            FlattenSpec(),
            DropoutSpec(0.25), DenseSpec(5), ActivationSpec("relu"),
            DropoutSpec(0.25), LinearOutputSpec(2),
        ]
        model = make_model(specs, (1, 12, 12), seed=3)
        x = np.random.default_rng(12).normal(size=(3, 1, 12, 12))
        worst = check_gradients(model, x)
        assert worst < GRAD_TOL


class TestConv:
    def test_fast_path_matches_direct_evaluation(self):
        model = make_model([Conv3x3Spec(4)], (3, 8, 8), seed=5)
        conv = model.layers[0]
        x = np.random.default_rng(13).normal(size=(2, 3, 8, 8))
        fast = model.forward(x)
        direct = nn.conv2d_direct(x, conv.params["w"], conv.params["b"])
        np.testing.assert_allclose(fast, direct, rtol=0, atol=1e-10)

    def test_output_shape(self):
        model = make_model([Conv3x3Spec(8)], (1, 10, 12), seed=0)
        y = model.forward(np.zeros((2, 1, 10, 12)))
        assert y.shape == (2, 8, 8, 10)

    def test_zero_input_zero_bias_gives_zero(self):
        model = make_model([Conv3x3Spec(4), ActivationSpec("relu")], (1, 6, 6), seed=0)
        y = model.forward(np.zeros((2, 1, 6, 6)))
        np.testing.assert_array_equal(y, 0.0)

    def test_too_small_input_names_layer(self):
        # Infeasible chains are rejected at build time, naming the layer.
        with pytest.raises(nn.ShapeError, match="layer 1"):
            make_model([MaxPool2x2Spec(), Conv3x3Spec(2)], (1, 4, 4), seed=0)

    def test_wrong_input_shape_reported(self):
        model = make_model([Conv3x3Spec(2)], (1, 4, 4), seed=0)
        with pytest.raises(nn.ShapeError, match="expects input shape"):
            model.forward(np.zeros((1, 1, 2, 2)))


class TestDenseHandCase:
    def test_matches_hand_matrix_vector_product(self):
        model = make_model([DenseSpec(2)], (3,), seed=0)
        dense = model.layers[0]
        dense.params["w"] = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        dense.params["b"] = np.array([0.5, -0.5])
        x = np.array([[1.0, 0.0, 2.0]])
        # Hand: [1*1 + 0*3 + 2*5 + 0.5, 1*2 + 0*4 + 2*6 - 0.5] = [11.5, 13.5]
        np.testing.assert_array_equal(model.forward(x), [[11.5, 13.5]])


class TestDropout:
    def test_training_statistics(self):
        rate = 0.3
        model = make_model([DropoutSpec(rate)], (100_000,), seed=0)
        model.seed_dropout(42)
        x = np.ones((1, 100_000))
        y = model.forward(x, training=True)
        dropped = float(np.mean(y == 0.0))
        assert abs(dropped - rate) < 0.02
        survivors = y[y != 0.0]
        np.testing.assert_allclose(survivors, 1.0 / (1.0 - rate), atol=1e-12)

    def test_inference_is_identity(self):
        model = make_model([DropoutSpec(0.5)], (50,), seed=0)
        x = np.random.default_rng(1).normal(size=(4, 50))
        np.testing.assert_array_equal(model.forward(x, training=False), x)

    def test_zero_rate_is_identity_in_training(self):
        model = make_model([DropoutSpec(0.0)], (10,), seed=0)
        x = np.random.default_rng(2).normal(size=(3, 10))
        np.testing.assert_array_equal(model.forward(x, training=True), x)


class TestBatchNorm:
    def test_training_output_normalized(self):
        model = make_model([BatchNormSpec()], (4, 8, 8), seed=0)
        x = np.random.default_rng(3).normal(loc=3.0, scale=2.5, size=(16, 4, 8, 8))
        y = model.forward(x, training=True)
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        assert np.max(np.abs(mean)) < 1e-6
        assert np.max(np.abs(var - 1.0)) < 1e-6

    def test_inference_uses_running_stats(self):
        model = make_model([BatchNormSpec()], (2,), seed=0)
        bn = model.layers[0]
        rng = np.random.default_rng(4)
        for _ in range(300):
            model.forward(rng.normal(loc=1.0, size=(32, 2)), training=True)
        x = np.zeros((1, 2))
        y = model.forward(x, training=False)
        expected = (0.0 - bn.running_mean) / np.sqrt(bn.running_var + 1e-8)
        np.testing.assert_allclose(y[0], expected, atol=1e-9)


class TestModel:
    def test_inference_is_pure(self):
        specs = [Conv3x3Spec(2), BatchNormSpec(), ActivationSpec("relu"),
                 MaxPool2x2Spec(), FlattenSpec(), DropoutSpec(0.3), LinearOutputSpec(3)]
        model = make_model(specs, (1, 8, 8), seed=1)
        x = np.random.default_rng(5).normal(size=(2, 1, 8, 8))
        a = model.forward(x)
        b = model.forward(x)
        np.testing.assert_array_equal(a, b)

    def test_backward_without_training_forward_rejected(self):
        model = make_model([DenseSpec(2)], (3,), seed=0)
        model.forward(np.zeros((1, 3)), training=False)
        with pytest.raises(RuntimeError):
            model.backward(np.zeros((1, 2)))

    def test_initial_output_bounded_on_unit_input(self):
        specs = [
            Conv3x3Spec(16), ActivationSpec("relu"), MaxPool2x2Spec(),
            Conv3x3Spec(16), ActivationSpec("relu"), MaxPool2x2Spec(),
            FlattenSpec(), DenseSpec(32), ActivationSpec("relu"), LinearOutputSpec(3),
        ]
        model = make_model(specs, (1, 32, 32), seed=7)
        x = np.random.default_rng(6).uniform(0, 1, size=(4, 1, 32, 32))
        y = model.forward(x)
        assert np.max(np.abs(y)) < 10.0

    def test_no_nan_inf_after_forward_backward(self):
        specs = [Conv3x3Spec(4), BatchNormSpec(), ActivationSpec("elu"),
                 MaxPool2x2Spec(), FlattenSpec(), DenseSpec(8),
                 ActivationSpec("relu"), LinearOutputSpec(2)]
        model = make_model(specs, (1, 10, 10), seed=2)
        x = np.random.default_rng(7).normal(size=(4, 1, 10, 10))
        y = model.forward(x, training=True)
        assert np.all(np.isfinite(y))
        model.backward(np.ones_like(y))
        for layer in model.layers:
            for g in layer.grads.values():
                assert np.all(np.isfinite(g))

    def test_float32_mode(self):
        model = nn.build_model([DenseSpec(2)], (3,), seed=0, dtype=np.float32)
        y = model.forward(np.ones((1, 3)))
        assert y.dtype == np.float32


class TestCheckpoint:
    def _trained_ish_model(self):
        specs = [Conv3x3Spec(2), BatchNormSpec(), ActivationSpec("relu"),
                 MaxPool2x2Spec(), FlattenSpec(), DropoutSpec(0.1), LinearOutputSpec(3)]
        model = make_model(specs, (1, 8, 8), seed=11)
        x = np.random.default_rng(8).normal(size=(4, 1, 8, 8))
        model.forward(x, training=True)  # move the batchnorm running stats
        return model

    def test_round_trip(self, tmp_path):
        model = self._trained_ish_model()
        path = tmp_path / "model.ckpt"
        nn.save_model(model, path)
        loaded = nn.load_model(path)
        x = np.random.default_rng(9).normal(size=(2, 1, 8, 8))
        np.testing.assert_array_equal(model.forward(x), loaded.forward(x))

    def test_version_mismatch_rejected(self, tmp_path):
        model = self._trained_ish_model()
        path = tmp_path / "model.ckpt"
        nn.save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(nn.CheckpointError, match="version"):
            nn.load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(nn.CheckpointError, match="magic"):
            nn.load_model(path)

    def test_truncation_rejected(self, tmp_path):
        model = self._trained_ish_model()
        path = tmp_path / "model.ckpt"
        nn.save_model(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(nn.CheckpointError, match="truncated"):
            nn.load_model(path)
