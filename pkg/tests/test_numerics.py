import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from finegrain.layers import Conv2d, Linear, MaxPool2d, ReLU
from finegrain.numerics import (
    ConfigurationError,
    ContractViolation,
    L2Normalize,
    finite_difference_gradient,
    finite_difference_param_gradient,
    gradients_close,
    l2_normalize,
)

from conftest import SEEDS, assert_grad_close


class TestFiniteDifferences:
    def test_sum_of_squares(self):
        (g,) = finite_difference_gradient(lambda x: np.sum(x * x), [np.array([3.0])])
        np.testing.assert_allclose(g, [6.0], rtol=1e-8)

    def test_constant_has_zero_gradient(self, rng):
        (g,) = finite_difference_gradient(lambda x: 7.5, [rng.normal(size=(3, 2))])
        assert np.all(g == 0.0)

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ContractViolation):
            finite_difference_gradient(lambda x: x * 2, [np.ones(3)])

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            finite_difference_gradient(lambda x: x.sum(), [np.ones(3)], epsilon=0.0)

    def test_inputs_are_not_mutated(self, rng):
        x = rng.normal(size=5)
        before = x.copy()
        finite_difference_gradient(lambda v: np.sum(v ** 3), [x])
        assert np.array_equal(x, before)

    def test_tolerance_has_absolute_floor(self):
        assert gradients_close([1e-8], [5e-8])
        assert not gradients_close([1.0], [1.001])
        assert gradients_close([1.0], [1.00005])


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], rtol=0, atol=1e-15)

    def test_zero_vector_unchanged(self):
        out = l2_normalize(np.zeros(2))
        assert np.array_equal(out, [0.0, 0.0])
        assert np.all(np.isfinite(out))

    def test_random_vector_has_unit_norm(self, rng):
        v = rng.normal(size=8)
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-12

    def test_axis(self, rng):
        v = rng.normal(size=(3, 5))
        out = l2_normalize(v, axis=0)
        np.testing.assert_allclose(np.linalg.norm(out, axis=0), 1.0, atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 12),
                  elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)))
    @settings(max_examples=100, deadline=None)
    def test_idempotent(self, v):
        if np.linalg.norm(v) < 1e-6:
            return
        once = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(once), once, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 6))
        proj = rng.normal(size=(4, 6))
        op = L2Normalize()
        op.forward(x)
        (dx,) = op.backward(proj)
        (num,) = finite_difference_gradient(lambda v: np.sum(l2_normalize(v) * proj), [x])
        assert_grad_close(dx, num, "l2 normalize")

    def test_backward_without_forward(self):
        with pytest.raises(ContractViolation):
            L2Normalize().backward(np.ones((1, 2)))


def _check_layer(layer, x, rng, what):
    """Analytic input and parameter gradients of <proj, layer(x)> against central differences."""
    y = layer.forward(x)
    proj = rng.normal(size=y.shape)
    (dx,) = layer.backward(proj)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    def loss(inp):
        out = layer.forward(inp)
        layer._ctx = None
        return np.sum(out * proj)

    (num,) = finite_difference_gradient(loss, [x])
    assert_grad_close(dx, num, f"{what} input")
    for name, p in layer.params.items():
        num_p = finite_difference_param_gradient(lambda: loss(x), p)
        assert_grad_close(grads[name], num_p, f"{what} {name}")


class TestLayerGradients:
    @pytest.mark.parametrize("seed", SEEDS[:3])
    @pytest.mark.parametrize("k", [1, 3])
    def test_conv(self, seed, k):
        rng = np.random.default_rng(seed)
        _check_layer(Conv2d(2, 3, k, rng), rng.normal(size=(2, 2, 5, 4)), rng, "conv")

    @pytest.mark.parametrize("seed", SEEDS[:3])
    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        _check_layer(Linear(5, 3, rng), rng.normal(size=(4, 5)), rng, "linear")

    @pytest.mark.parametrize("seed", SEEDS[:3])
    def test_relu_away_from_kink(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 7))
        x[np.abs(x) < 1e-3] = 0.5
        _check_layer(ReLU(), x, rng, "relu")

    @pytest.mark.parametrize("seed", SEEDS[:3])
    def test_maxpool(self, seed):
        rng = np.random.default_rng(seed)
        _check_layer(MaxPool2d(), rng.normal(size=(2, 3, 4, 6)), rng, "maxpool")

    def test_conv_matches_direct_convolution(self, rng):
        conv = Conv2d(2, 3, 3, rng)
        x = rng.normal(size=(1, 2, 5, 5))
        y = conv.forward(x)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        w, b = conv.params["weight"], conv.params["bias"]
        ref = np.zeros_like(y)
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(y, ref, atol=1e-12)
