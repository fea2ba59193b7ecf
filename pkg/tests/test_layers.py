import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platenet import layers as L
from platenet.errors import BuildError, ShapeError, StateError
from platenet.optim import grad_check


def conv_oracle(x, w, b, stride):
    """Direct nested-loop valid convolution (cross-correlation), float64."""
    n, h, wd, c = x.shape
    k, _, _, f = w.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, oh, ow, f))
    for i in range(n):
        for r in range(oh):
            for s in range(ow):
                patch = x[i, r * stride:r * stride + k, s * stride:s * stride + k, :].astype(np.float64)
                for j in range(f):
                    out[i, r, s, j] = np.sum(patch * w[:, :, :, j]) + b[j]
    return out


def check_layer_grads(layer, x, seed=0, kink_tolerance=None):
    """Gradient-check params and input of a built layer under loss sum(out * R).

    The analytic pass runs in the layer's float32; the central differences are
    taken on a float64 copy so that their own rounding noise stays far below
    the tolerance even for small gradient entries.
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(x, training=False)
    proj = rng.uniform(-1, 1, out.shape).astype(np.float32)
    gx = layer.backward(proj)
    keys = sorted(layer.params)
    analytic = [layer.grads[k] for k in keys] + [gx]

    twin = copy.deepcopy(layer)
    twin.astype(np.float64)
    x64 = x.astype(np.float64)
    params = [twin.params[k] for k in keys] + [x64]
    proj64 = proj.astype(np.float64)

    def loss():
        return float(np.sum(twin.forward(x64, training=False) * proj64))

    return grad_check(loss, params, analytic, tolerance=1e-2, h=1e-3, kink_tolerance=kink_tolerance)


class TestWindowArithmetic:
    @pytest.mark.parametrize("size,window,stride,expected", [
        (300, 3, 2, 149), (149, 2, 2, 74), (74, 3, 2, 36), (36, 2, 2, 18),
        (64, 3, 2, 31), (31, 2, 2, 15), (15, 3, 2, 7), (7, 2, 2, 3), (3, 3, 1, 1),
    ])
    def test_valid_output_size(self, size, window, stride, expected):
        assert L.window_output_size(size, window, stride) == expected


class TestActivations:
    def test_relu_backward_masks_nonpositive(self):
        x = np.array([-1.0, 0.0, 2.0], np.float32)
        np.testing.assert_array_equal(L.relu_backward(x, np.ones(3, np.float32)), [0, 0, 1])

    def test_sigmoid_stable_extremes(self):
        y = L.sigmoid(np.array([-1000.0, 0.0, 1000.0], np.float32))
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0])

    def test_sigmoid_backward(self):
        x = np.linspace(-4, 4, 9)
        y = L.sigmoid(x)
        h = 1e-6
        numeric = (L.sigmoid(x + h) - L.sigmoid(x - h)) / (2 * h)
        np.testing.assert_allclose(L.sigmoid_backward(y, np.ones_like(y)), numeric, rtol=1e-6)


class TestConvolution:
    @pytest.mark.parametrize("stride,k,c,f", [(1, 3, 1, 2), (2, 3, 2, 4), (1, 1, 3, 2), (3, 2, 1, 1)])
    def test_forward_matches_loop_oracle(self, rng, stride, k, c, f):
        x = rng.normal(size=(2, 9, 8, c)).astype(np.float32)
        w = rng.normal(size=(k, k, c, f)).astype(np.float32)
        b = rng.normal(size=f).astype(np.float32)
        np.testing.assert_allclose(L.conv2d_forward(x, w, b, stride), conv_oracle(x, w, b, stride),
                                   rtol=1e-5, atol=1e-5)

    def test_im2col_col2im_adjoint(self, rng):
        """<im2col(x), c> == <x, col2im(c)> for the same geometry."""
        x = rng.normal(size=(2, 7, 6, 3))
        cols = L.im2col(x, 3, 2)
        c = rng.normal(size=cols.shape)
        assert np.isclose(np.sum(cols * c), np.sum(x * L.col2im(c, x.shape, 3, 2)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            L.conv2d_forward(np.zeros((1, 5, 5, 2), np.float32), np.zeros((3, 3, 1, 1), np.float32),
                             np.zeros(1, np.float32))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients_linear(self, rng, stride):
        layer = L.Conv2D(3, kernel_size=3, stride=stride, activation=None)
        layer.build((7, 7, 2), rng)
        layer.params["bias"] = rng.normal(size=3).astype(np.float32)
        x = rng.normal(size=(2, 7, 7, 2)).astype(np.float32)
        rep = check_layer_grads(layer, x)
        assert rep.passed, rep.failures[:3]
        assert rep.skipped == 0

    def test_gradients_with_relu(self, rng):
        layer = L.Conv2D(4, kernel_size=3, stride=2, activation="relu")
        layer.build((9, 9, 1), rng)
        x = rng.normal(size=(2, 9, 9, 1)).astype(np.float32)
        rep = check_layer_grads(layer, x, kink_tolerance=0.01)
        assert rep.passed, rep.failures[:3]

    def test_glorot_fan(self, rng):
        layer = L.Conv2D(32, 3, 2)
        layer.build((300, 300, 1), rng)
        limit = math.sqrt(6 / (9 * 1 + 9 * 32))
        w = layer.params["weights"]
        assert w.shape == (3, 3, 1, 32)
        assert np.abs(w).max() <= limit
        assert np.abs(w).max() > 0.9 * limit
        assert not layer.params["bias"].any()
        assert layer.param_count == 320

    def test_too_small_input_names_layer(self):
        layer = L.Conv2D(2, 3, 2)
        layer.name = "conv2d_9"
        with pytest.raises(BuildError) as info:
            layer.output_shape((2, 2, 1))
        assert info.value.layer == "conv2d_9"

    def test_backward_before_forward(self, rng):
        layer = L.Conv2D(2, 3)
        layer.build((5, 5, 1), rng)
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 3, 3, 2), np.float32))


class TestMaxPool:
    def test_forward_and_routing(self):
        x = np.array([[1, 5, 2, 0],
                      [3, 4, 8, 1],
                      [0, 0, 7, 7],
                      [9, 0, 7, 6]], np.float32).reshape(1, 4, 4, 1)
        out, argmax = L.maxpool_forward(x)
        np.testing.assert_array_equal(out[0, :, :, 0], [[5, 8], [9, 7]])
        g = L.maxpool_backward(argmax, x.shape, np.ones_like(out))
        # the 7/7/7 tie goes to the first element in row-major order
        expected = np.array([[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 1, 0], [1, 0, 0, 0]])
        np.testing.assert_array_equal(g[0, :, :, 0], expected)

    def test_odd_extent_drops_last_row(self):
        out, _ = L.maxpool_forward(np.zeros((1, 5, 5, 2), np.float32))
        assert out.shape == (1, 2, 2, 2)

    def test_gradients_tie_free(self, rng):
        layer = L.MaxPool2D()
        layer.build((6, 6, 2), rng)
        # a permutation guarantees distinct values spaced far beyond h
        x = (rng.permutation(2 * 6 * 6 * 2).reshape(2, 6, 6, 2) * 0.01).astype(np.float32)
        rep = check_layer_grads(layer, x)
        assert rep.passed and rep.checked == x.size

    def test_backward_requires_forward(self):
        with pytest.raises(StateError):
            L.maxpool_backward(None, (1, 4, 4, 1), np.zeros((1, 2, 2, 1), np.float32))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 3))
    def test_gradient_mass_preserved(self, h, w, c):
        x = np.random.default_rng(h * 100 + w * 10 + c).normal(size=(1, h, w, c)).astype(np.float32)
        out, argmax = L.maxpool_forward(x)
        g = L.maxpool_backward(argmax, x.shape, np.ones_like(out))
        assert g.sum() == out.size
        assert set(np.unique(g)) <= {0.0, 1.0}


class TestDense:
    @pytest.mark.parametrize("activation", [None, "sigmoid"])
    def test_gradients(self, rng, activation):
        layer = L.Dense(5, activation=activation)
        layer.build((7,), rng)
        layer.params["bias"] = rng.normal(size=5).astype(np.float32)
        x = rng.normal(size=(4, 7)).astype(np.float32)
        rep = check_layer_grads(layer, x)
        assert rep.passed, rep.failures[:3]

    def test_param_counts(self, rng):
        layer = L.Dense(128)
        layer.build((5184,), rng)
        assert layer.param_count == 663680

    def test_rejects_unknown_activation(self):
        with pytest.raises(ValueError):
            L.Dense(3, activation="tanh")


class TestDropout:
    def test_inference_is_identity(self, rng):
        layer = L.Dropout(0.5, np.random.default_rng(1))
        x = rng.normal(size=(8, 10)).astype(np.float32)
        assert layer.forward(x, training=False) is x

    def test_inverted_scaling(self):
        layer = L.Dropout(0.2, np.random.default_rng(1))
        x = np.ones((200, 500), np.float32)
        y = layer.forward(x, training=True)
        assert set(np.unique(y)) <= {0.0, np.float32(1.25)}
        assert abs((y == 0).mean() - 0.2) < 0.01
        assert abs(y.mean() - 1.0) < 0.01

    def test_backward_uses_same_mask(self):
        layer = L.Dropout(0.3, np.random.default_rng(2))
        y = layer.forward(np.ones((4, 50), np.float32), training=True)
        g = layer.backward(np.ones((4, 50), np.float32))
        np.testing.assert_array_equal(g, y)

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            L.Dropout(1.0)


class TestFlatten:
    def test_round_trip(self, rng):
        layer = L.Flatten()
        assert layer.build((3, 4, 2), rng) == (24,)
        x = rng.normal(size=(2, 3, 4, 2)).astype(np.float32)
        y = layer.forward(x)
        np.testing.assert_array_equal(y[1], x[1].reshape(-1))
        np.testing.assert_array_equal(layer.backward(y), x)
