"""Layer forward semantics, analytic gradients, and the baseline network.

Every backward pass is checked against central finite differences in
float64; the scalar probe is sum(forward(x) * r) for a fixed random r.
"""

import numpy as np
import pytest

from noisebench import build_baseline, load_checkpoint, save_checkpoint
from noisebench.errors import ConfigError
from noisebench.layers import BatchNorm, Conv2d, Dense, MaxPool, ReLU, Softmax

from conftest import finite_difference, relative_error

GRAD_TOL = 1e-4


def layer_gradcheck(make_layer, x_shape, seed, train=True):
    """Check input and parameter gradients of a layer on one random input."""
    rng = np.random.default_rng(seed)
    layer = make_layer(rng)
    x = rng.standard_normal(x_shape)
    probe = rng.standard_normal(layer.forward(x.copy(), train).shape)

    def loss():
        return float((layer.forward(x, train) * probe).sum())

    loss()  # populate the cache
    for p in layer.params():
        p.grad[...] = 0
    analytic_dx = layer.backward(probe)
    fd_dx = finite_difference(loss, x)
    assert relative_error(analytic_dx, fd_dx) < GRAD_TOL
    for p in layer.params():
        fd_dp = finite_difference(loss, p.value)
        assert relative_error(p.grad, fd_dp) < GRAD_TOL, p.name


class TestReLU:
    def test_definition(self):
        out = ReLU().forward(np.array([[-1.0, 0.0, 2.0]]), train=False)
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_backward_gates_upstream(self):
        layer = ReLU()
        layer.forward(np.array([-1.0, 2.0]), train=True)
        np.testing.assert_array_equal(layer.backward(np.array([5.0, 5.0])), [0.0, 5.0])

    def test_gradcheck(self):
        for seed in range(5):
            layer_gradcheck(lambda rng: ReLU(), (3, 2, 4, 5), seed)

    def test_backward_without_forward(self):
        with pytest.raises(RuntimeError):
            ReLU().backward(np.ones(3))


class TestConv2d:
    def test_identity_kernel(self):
        layer = Conv2d(1, 1, 1, "same", dtype=np.float64)
        layer.weight.value[...] = 1.0
        layer.bias.value[...] = 0.0
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
        np.testing.assert_allclose(layer.forward(x, train=False), x)

    def test_shape_mismatch_reports_shapes(self):
        layer = Conv2d(3, 4, 3)
        with pytest.raises(ValueError, match=r"\(2, 1, 5, 5\)"):
            layer.forward(np.zeros((2, 1, 5, 5), dtype=np.float32), train=False)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_gradcheck(self, padding):
        for seed in range(5):
            layer_gradcheck(
                lambda rng: Conv2d(2, 3, 3, padding, rng, np.float64),
                (2, 2, 6, 7),
                seed,
            )


class TestBatchNorm:
    def test_train_output_moments(self):
        # Before the affine part (gamma=1, beta=0) each channel of the batch
        # should be normalized to zero mean and unit variance.
        rng = np.random.default_rng(3)
        layer = BatchNorm(4, dtype=np.float64)
        x = 2.0 + 3.0 * rng.standard_normal((64, 4, 5, 6))
        out = layer.forward(x, train=True)
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-4

    def test_inference_uses_running_stats_and_is_batch_size_independent(self):
        rng = np.random.default_rng(4)
        layer = BatchNorm(3, dtype=np.float64)
        for _ in range(20):
            layer.forward(rng.standard_normal((16, 3, 4, 4)), train=True)
        x = rng.standard_normal((8, 3, 4, 4))
        full = layer.forward(x, train=False)
        split = np.concatenate(
            [layer.forward(x[i : i + 1], train=False) for i in range(8)]
        )
        np.testing.assert_allclose(full, split, rtol=0, atol=1e-12)

    def test_gradcheck(self):
        for seed in range(5):
            layer_gradcheck(
                lambda rng: BatchNorm(3, dtype=np.float64), (8, 3, 4, 5), seed
            )


class TestMaxPool:
    def test_window_max_and_floor_crop(self):
        x = np.arange(2 * 1 * 5 * 5, dtype=np.float64).reshape(2, 1, 5, 5)
        out = MaxPool(2).forward(x, train=False)
        assert out.shape == (2, 1, 2, 2)
        assert out[0, 0, 0, 0] == x[0, 0, 1, 1]

    def test_gradcheck(self):
        for seed in range(5):
            layer_gradcheck(lambda rng: MaxPool(2), (2, 3, 6, 8), seed)


class TestDense:
    def test_gradcheck(self):
        for seed in range(5):
            layer_gradcheck(
                lambda rng: Dense(24, 5, rng, np.float64), (3, 2, 3, 4), seed
            )


class TestSoftmax:
    def test_rows_are_a_probability_simplex(self):
        rng = np.random.default_rng(5)
        out = Softmax().forward(100.0 * rng.standard_normal((32, 20)), train=False)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_gradcheck(self):
        for seed in range(5):
            layer_gradcheck(lambda rng: Softmax(), (4, 6), seed)


class TestBaseline:
    def test_parameter_budget(self):
        net = build_baseline(96, 86, 20)
        assert 400_000 <= net.param_count() <= 600_000

    def test_param_count_is_a_pure_function_of_dims(self):
        a = build_baseline(96, 86, 20, seed=1).param_count()
        b = build_baseline(96, 86, 20, seed=99).param_count()
        assert a == b

    def test_output_simplex(self):
        net = build_baseline(16, 16, 5, channels=(3, 4, 5), seed=2)
        x = np.random.default_rng(2).standard_normal((6, 1, 16, 16)).astype(np.float32)
        out = net.forward(x, train=False)
        assert out.shape == (6, 5)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_input_too_small_for_pooling(self):
        with pytest.raises(ConfigError):
            build_baseline(4, 4, 3)

    def test_end_to_end_gradcheck(self):
        # Scalar cross-entropy of the softmax output against class 0,
        # differentiated through the whole network to a conv weight.
        rng = np.random.default_rng(7)
        net = build_baseline(8, 8, 3, channels=(2, 3, 4), seed=7, dtype=np.float64)
        x = rng.standard_normal((4, 1, 8, 8))

        def loss():
            probs = net.forward(x, train=True)
            return float(-np.log(np.maximum(probs[:, 0], 1e-12)).sum())

        probs = net.forward(x, train=True)
        grad = np.zeros_like(probs)
        grad[:, 0] = -1.0 / np.maximum(probs[:, 0], 1e-12)
        net.zero_grads()
        net.backward(grad)
        conv_w = next(p for p in net.params() if p.name == "conv2.weight")
        sub = [tuple(idx) for idx in np.ndindex(*conv_w.value.shape)][::7]
        for idx in sub[:12]:
            orig = conv_w.value[idx]
            conv_w.value[idx] = orig + 1e-5
            hi = loss()
            conv_w.value[idx] = orig - 1e-5
            lo = loss()
            conv_w.value[idx] = orig
            fd = (hi - lo) / 2e-5
            denom = max(abs(fd), abs(conv_w.grad[idx]), 1e-8)
            assert abs(fd - conv_w.grad[idx]) / denom < 1e-3


class TestCheckpoint:
    def test_roundtrip_restores_outputs(self, tmp_path):
        net = build_baseline(16, 16, 4, channels=(3, 4, 5), seed=9)
        x = np.random.default_rng(9).standard_normal((3, 1, 16, 16)).astype(np.float32)
        net.forward(x, train=True)  # move the running stats off their init
        before = net.forward(x, train=False)
        extra = {"standardizer_mean": np.arange(16, dtype=np.float32)}
        save_checkpoint(tmp_path / "net.nbc", net, {"epoch": 3}, extra)
        restored, meta, arrays = load_checkpoint(tmp_path / "net.nbc")
        assert meta == {"epoch": 3}
        np.testing.assert_array_equal(arrays["standardizer_mean"], extra["standardizer_mean"])
        np.testing.assert_array_equal(restored.forward(x, train=False), before)

    def test_rejects_non_checkpoint(self, tmp_path):
        bogus = tmp_path / "x.nbc"
        bogus.write_bytes(b"not a checkpoint")
        with pytest.raises(ConfigError):
            load_checkpoint(bogus)
