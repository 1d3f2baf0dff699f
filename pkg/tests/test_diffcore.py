"""Tensor core and operation semantics: closed-form examples, error
contracts, and the invariants every public op must keep."""

import math

import numpy as np
import pytest

from addv import diffcore as dc
from addv.diffcore import Tensor
from addv.errors import NonFiniteError, ShapeError


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, shape))


class TestElementwise:
    def test_add(self):
        out = dc.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_mul_identity_bit_exact(self):
        x = rand((17,), seed=3)
        out = dc.mul(x, 1.0)
        assert np.array_equal(out.data, x.data)

    def test_abs_value_and_subgradient(self):
        x = Tensor([-3.5, 0.0, 2.0], requires_grad=True)
        out = abs(x)
        assert np.array_equal(out.data, [3.5, 0.0, 2.0])
        out.sum().backward()
        # sign convention: -1 below zero, subgradient at 0 fixed to 0
        assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            dc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_division_by_exact_zero_rejected(self):
        with pytest.raises(ZeroDivisionError):
            dc.div(Tensor([1.0]), Tensor([0.0]))

    def test_broadcast_scalar(self):
        out = rand((2, 3)) * 2.0 + 1.0
        assert out.shape == (2, 3)

    def test_min_max_pointwise(self):
        a, b = Tensor([1.0, 5.0]), Tensor([3.0, 2.0])
        assert np.array_equal(dc.minimum(a, b).data, [1.0, 2.0])
        assert np.array_equal(dc.maximum(a, b).data, [3.0, 5.0])

    def test_exp_log_roundtrip(self):
        x = rand((9,), seed=5, lo=0.1, hi=2.0)
        assert np.allclose(dc.log(dc.exp(x)).data, x.data, atol=1e-12)

    def test_nonfinite_guard(self):
        with pytest.raises(NonFiniteError):
            dc.exp(Tensor([1000.0]))


class TestSigmoid:
    def test_closed_forms(self):
        out = dc.sigmoid(Tensor([0.0, math.log(3.0)]))
        assert out.data[0] == 0.5
        assert abs(out.data[1] - 0.75) < 1e-15

    def test_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        dc.sigmoid(x).sum().backward()
        assert abs(x.grad[0] - 0.25) < 1e-15

    def test_outputs_in_open_unit_interval(self):
        out = dc.sigmoid(rand((100,), seed=1, lo=-30, hi=30))
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


class TestConv2d:
    def test_ones_kernel_counts_window(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = dc.conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_zero_weights_bias_constant(self):
        x = rand((2, 3, 5, 5), seed=2)
        out = dc.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.full(4, 2.5)), 1, 1)
        assert np.all(out.data == 2.5)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = dc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data

        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expect = np.zeros((1, 3, 5, 5))
        for co in range(3):
            for i in range(5):
                for j in range(5):
                    acc = b[co]
                    for ci in range(2):
                        for di in range(3):
                            for dj in range(3):
                                acc += xp[0, ci, i + di, j + dj] * w[co, ci, di, dj]
                    expect[0, co, i, j] = acc
        assert np.abs(out - expect).max() < 1e-12

    def test_non_integral_extent_rejected(self):
        with pytest.raises(ShapeError):
            dc.conv2d(rand((1, 1, 6, 6)), rand((1, 1, 3, 3)), Tensor(np.zeros(1)), 2, 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            dc.conv2d(rand((1, 1, 4, 4)), rand((1, 1, 2, 2)), Tensor(np.zeros(1)), 1, 0)


class TestSoftmaxTau:
    def test_symmetric_logits(self):
        for tau in (1.0, 0.5, 0.1):
            out = dc.softmax_tau(Tensor(np.zeros((2, 1, 1))), tau)
            assert np.allclose(out.data.ravel(), [0.5, 0.5], atol=1e-15)

    def test_closed_form_tau1(self):
        out = dc.softmax_tau(Tensor(np.array([math.log(2), 0.0]).reshape(2, 1, 1)), 1.0)
        assert np.allclose(out.data.ravel(), [2 / 3, 1 / 3], atol=1e-15)

    def test_closed_form_tau_half(self):
        out = dc.softmax_tau(Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1)), 0.5)
        e2 = math.exp(2.0)
        assert np.allclose(out.data.ravel(), [e2 / (1 + e2), 1 / (1 + e2)], atol=1e-12)

    def test_tau_out_of_range_rejected(self):
        for tau in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                dc.softmax_tau(rand((2, 1, 1)), tau)

    def test_pixel_sums_and_range(self):
        out = dc.softmax_tau(rand((8, 5, 6), seed=4, lo=-5, hi=5), 0.3)
        sums = out.data.sum(axis=0)
        assert np.abs(sums - 1.0).max() < 1e-6
        assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)

    def test_argmax_invariant_under_tau(self):
        y = rand((6, 4, 4), seed=9, lo=-2, hi=2)
        ref = dc.argmax_channels(dc.softmax_tau(y, 1.0))
        for tau in (0.5, 0.25, 0.1, 0.01 + 0.0):
            if tau > 1.0 or tau <= 0:
                continue
            assert np.array_equal(dc.argmax_channels(dc.softmax_tau(y, tau)), ref)

    def test_sharpening_strictly_raises_max_probability(self):
        y = rand((6, 4, 4), seed=10, lo=-2, hi=2)
        prev = dc.softmax_tau(y, 1.0).data.max(axis=0)
        for tau in (0.5, 0.25, 0.1):
            cur = dc.softmax_tau(y, tau).data.max(axis=0)
            assert np.all(cur > prev)
            prev = cur

    def test_overflow_safe_at_small_tau(self):
        y = rand((4, 2, 2), seed=11, lo=-100, hi=100)
        out = dc.softmax_tau(y, 0.01)
        assert np.all(np.isfinite(out.data))


class TestCumsumAndPools:
    def test_cumsum_values(self):
        out = dc.cumsum_channels(Tensor(np.full((4, 1, 1), 0.5)))
        assert np.array_equal(out.data.ravel(), [0.5, 1.0, 1.5, 2.0])

    def test_cumsum_single_element(self):
        out = dc.cumsum_channels(Tensor(np.array([[[3.25]]])))
        assert out.data.ravel()[0] == 3.25

    def test_global_avg_pool_constant(self):
        out = dc.global_avg_pool(Tensor(np.full((1, 2, 3, 4), 7.0)))
        assert np.all(out.data == 7.0) and out.shape == (1, 2, 1, 1)

    def test_global_avg_pool_mean(self):
        out = dc.global_avg_pool(Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)))
        assert out.data.ravel()[0] == 4.0

    def test_avg_pool2_blocks(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = dc.avg_pool2(x)
        assert np.array_equal(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


class TestUpsampleBilinear:
    def test_constant_stays_constant(self):
        out = dc.upsample_bilinear(Tensor(np.full((1, 1, 3, 3), 3.0)), 2)
        assert np.all(out.data == 3.0) and out.shape == (1, 1, 6, 6)

    def test_factor_one_identity(self):
        x = rand((1, 2, 3, 3), seed=12)
        assert np.array_equal(dc.upsample_bilinear(x, 1).data, x.data)

    def test_hand_evaluated_weights(self):
        x = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        out = dc.upsample_bilinear(x, 2)
        for row in out.data[0, 0]:
            assert np.allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


class TestBilinearSample:
    def test_identity_grid_exact(self):
        img = rand((1, 3, 5, 7), seed=13)
        u, v = np.meshgrid(np.arange(7.0), np.arange(5.0))
        grid = Tensor(np.stack([u, v], axis=-1)[None])
        out, valid = dc.bilinear_sample(img, grid)
        assert np.array_equal(out.data, img.data)
        assert valid.all()

    def test_midpoint_interpolation(self):
        img = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
        grid = Tensor(np.array([0.5, 0.0]).reshape(1, 1, 1, 2))
        out, valid = dc.bilinear_sample(img, grid)
        assert out.data.ravel()[0] == 0.5 and valid.all()

    def test_out_of_range_clamped_and_flagged(self):
        img = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        grid = Tensor(np.array([[-1.0, 0.0], [5.0, 1.0]], dtype=float).reshape(1, 1, 2, 2))
        out, valid = dc.bilinear_sample(img, grid)
        assert np.array_equal(out.data.ravel(), [0.0, 3.0])  # clamped to borders
        assert not valid.any()


class TestTensorPlumbing:
    def test_finite_invariant_on_public_results(self):
        x = rand((64,), seed=14)
        y = dc.exp(dc.sigmoid(x) * 3.0) / 2.0
        assert np.all(np.isfinite(y.data))

    def test_detach_cuts_graph(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * 3.0).detach()
        assert not y.requires_grad

    def test_backward_requires_grad(self):
        with pytest.raises(ShapeError):
            Tensor([1.0]).backward()

    def test_value_semantics_inputs_untouched(self):
        x = rand((4, 4), seed=15)
        before = x.data.copy()
        _ = dc.exp(x) * dc.sigmoid(x) - abs(x)
        assert np.array_equal(x.data, before)
