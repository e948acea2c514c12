import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuronet import oracles
from neuronet.errors import NumericError, UsageError
from neuronet.selftest import gradient_cases, gradient_error
from neuronet.tensor import (RunningStats, Tape, Tensor, add, backward, batch_norm, conv3d,
                             finite_difference_gradient, leaky_relu, mul, softmax_channels,
                             tensor_sum, upsample2x)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


class TestConv:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3])
    def test_bit_exact_against_direct_loops(self, rng, stride, k):
        for _ in range(6):
            x = rng.standard_normal((2, *rng.integers(1, 7, 3)))
            w = rng.standard_normal((3, 2, k, k, k))
            b = rng.standard_normal(3)
            fast = conv3d(t64(x), t64(w), t64(b), stride).data
            np.testing.assert_array_equal(fast, oracles.direct_conv3d(x, w, b, stride))

    def test_float32_matches_float64_reference(self, rng):
        x = rng.standard_normal((3, 6, 5, 4)).astype(np.float32)
        w = rng.standard_normal((2, 3, 3, 3, 3)).astype(np.float32)
        b = np.zeros(2, np.float32)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), 1)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out.data, oracles.direct_conv3d(x, w, b, 1), rtol=1e-4, atol=1e-4)

    def test_output_extent_is_ceil_of_stride(self):
        x = t64(np.ones((1, 5, 6, 7)))
        out = conv3d(x, t64(np.ones((1, 1, 3, 3, 3))), t64(np.zeros(1)), 2)
        assert out.shape == (1, 3, 3, 4)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 4, 4, 4))
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(conv3d(t64(x), t64(k), t64([0.0]), 1).data, x)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, a, b):
        r = np.random.default_rng(0)
        x1, x2 = r.standard_normal((2, 2, 4, 3, 3))
        w = r.standard_normal((2, 2, 3, 3, 3))
        z = np.zeros(2)
        lhs = conv3d(t64(a * x1 + b * x2), t64(w), t64(z), 1).data
        rhs = a * conv3d(t64(x1), t64(w), t64(z), 1).data + b * conv3d(t64(x2), t64(w), t64(z), 1).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("case", sorted(gradient_cases(np.random.default_rng(0))))
def test_gradients_match_finite_differences(case):
    build, inputs = gradient_cases(np.random.default_rng(5))[case]
    assert gradient_error(build, inputs) < 1e-5


def test_float32_gradient_against_float64_differences(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    k = rng.standard_normal((2, 2, 3, 3, 3))
    proj = rng.standard_normal((2, 4, 4, 4))
    xt = Tensor(x, requires_grad=True)
    kt = Tensor(k, requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(mul(conv3d(xt, kt, Tensor(np.zeros(2, np.float32)), 1), proj.astype(np.float32)))
    gk = backward(tape, loss, [kt])[0]
    numeric = finite_difference_gradient(
        lambda a: tensor_sum(mul(conv3d(t64(x), t64(a), t64(np.zeros(2)), 1), proj)), k)
    assert np.linalg.norm(gk - numeric) / np.linalg.norm(numeric) < 1e-3


class TestTape:
    def test_reuse_is_rejected(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(mul(a, a))
        backward(tape, loss, [a])
        with pytest.raises(UsageError):
            backward(tape, loss, [a])

    def test_non_scalar_loss(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = mul(a, 2.0)
        with pytest.raises(UsageError):
            backward(tape, out, [a])

    def test_unused_tensor_gets_zero(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(a)
        ga, gb = backward(tape, loss, [a, b])
        np.testing.assert_array_equal(ga, [1.0, 1.0])
        np.testing.assert_array_equal(gb, [0.0])

    def test_fan_out_accumulates(self):
        a = Tensor([3.0], requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = tensor_sum(add(mul(a, a), a))
        assert backward(tape, loss, {"a": a})["a"][0] == pytest.approx(7.0)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_result_raises(self):
        with Tape():
            with pytest.raises(NumericError):
                mul(Tensor([1e300]), 1e10)

    def test_tensors_are_immutable(self):
        a = Tensor([1.0])
        with pytest.raises(ValueError):
            a.data[0] = 2.0


class TestOps:
    def test_leaky_relu_values(self):
        out = leaky_relu(t64([-2.0, 0.0, 3.0]), 0.1)
        np.testing.assert_allclose(out.data, [-0.2, 0.0, 3.0])

    def test_upsample_linear_ramp(self):
        out = upsample2x(t64(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))).data.ravel()
        np.testing.assert_allclose(out[:4], [0.0, 0.5, 1.5, 2.0])

    def test_upsample_matches_oracle(self, rng):
        x = rng.standard_normal((2, 3, 2, 3))
        np.testing.assert_allclose(upsample2x(t64(x)).data, oracles.interpolate_trilinear(x), atol=1e-12)

    @given(st.floats(-100, 100, allow_nan=False))
    def test_upsample_keeps_constants(self, c):
        out = upsample2x(t64(np.full((1, 2, 3, 2), c))).data
        assert np.all(out == c)

    def test_softmax_sums_to_one(self, rng):
        p = softmax_channels(t64(rng.standard_normal((4, 2, 3, 2)) * 20)).data
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)

    def test_batch_norm_normalises_and_updates_running_stats(self, rng):
        x = rng.standard_normal((3, 4, 4, 4)) * 5 + 2
        running = RunningStats(3, dtype=np.float64)
        out = batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), running, training=True).data
        np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(1, 2, 3)), 1.0, atol=1e-4)
        mean = x.mean(axis=(1, 2, 3))
        np.testing.assert_allclose(running.mean, 0.1 * mean)

    def test_batch_norm_inference_is_pure(self, rng):
        running = RunningStats(2, dtype=np.float64)
        before = running.copy()
        batch_norm(t64(rng.standard_normal((2, 2, 2, 2))), t64(np.ones(2)), t64(np.zeros(2)), running, training=False)
        np.testing.assert_array_equal(running.mean, before.mean)
        np.testing.assert_array_equal(running.var, before.var)


def test_finite_difference_of_quadratic():
    g = finite_difference_gradient(lambda a: float((a ** 2).sum()), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [2.0, -4.0], rtol=1e-8)
    assert not math.isnan(g.sum())
