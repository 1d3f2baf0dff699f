"""Gradient oracle suite: every differentiable op against central finite
differences, in double precision, on several random inputs."""

import numpy as np
import pytest

from addv import checks, diffcore as dc
from addv.diffcore import Tensor, gradcheck


def test_ops_scope_all_pass():
    reports = checks.run_scope("ops")
    failed = [str(r) for r in reports if not r.passed]
    assert not failed, "\n".join(failed)


def test_losses_scope_all_pass():
    reports = checks.run_scope("losses")
    failed = [str(r) for r in reports if not r.passed]
    assert not failed, "\n".join(failed)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_core_ops_pass_on_multiple_random_inputs(seed):
    """Each registered op must pass at tol 1e-4 on at least 3 random draws."""
    rng = np.random.default_rng(seed)

    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape))

    w_conv = rng.normal(size=(1, 2, 4, 4))
    w_soft = rng.normal(size=(3, 2, 2))
    w_pool = rng.normal(size=(1, 2, 1, 1))
    w_up = rng.normal(size=(1, 1, 6, 6))
    w_sample = rng.normal(size=(1, 1, 2, 2))
    w_box = rng.normal(size=(4, 4))
    grid = Tensor(rng.uniform(0.6, 2.4, (1, 2, 2, 2)))

    cases = [
        ("conv2d", lambda x, w, b: (dc.conv2d(x, w, b, 1, 1) * w_conv).sum(),
         [t((1, 3, 4, 4)), t((2, 3, 3, 3)), t((2,))]),
        ("sigmoid", lambda x: (dc.sigmoid(x) * w_box).sum(), [t((4, 4))]),
        ("softmax_tau", lambda y: (dc.softmax_tau(y, 0.5) * w_soft).sum(), [t((3, 2, 2))]),
        ("cumsum_channels", lambda x: (dc.cumsum_channels(x) * w_soft).sum(), [t((3, 2, 2))]),
        ("global_avg_pool", lambda x: (dc.global_avg_pool(x) * w_pool).sum(), [t((1, 2, 3, 3))]),
        ("avg_pool2", lambda x: dc.avg_pool2(x).sum(), [t((1, 2, 4, 4))]),
        ("upsample_bilinear", lambda x: (dc.upsample_bilinear(x, 2) * w_up).sum(),
         [t((1, 1, 3, 3))]),
        ("bilinear_sample", lambda i, g: (dc.bilinear_sample(i, g)[0] * w_sample).sum(),
         [t((1, 1, 4, 4)), grid]),
        ("box_filter3", lambda x: (dc.box_filter3(x) * w_box).sum(), [t((4, 4))]),
        ("elementwise", lambda a, b: (a * b + abs(a) - dc.exp(b) / 2.0
                                      + dc.minimum(a, b) + dc.maximum(a, b * 0.5)).sum(),
         [t((6,)), t((6,))]),
        ("elu", lambda x: (dc.elu(x) * w_box).sum(), [t((4, 4))]),
    ]
    for name, fn, inputs in cases:
        report = gradcheck(fn, inputs, eps=1e-6, tol=1e-4, name=f"{name}/seed{seed}")
        assert report.passed, str(report)


def test_gradcheck_constant_function_passes():
    """Softmax summed over channels is constant 1: gradient ~ 0 everywhere."""
    y = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3)))
    report = gradcheck(lambda t: dc.softmax_tau(t, 0.7).sum(), [y], name="softmax_const")
    assert report.passed
    assert report.max_rel_err < 1e-6


def test_gradcheck_linear_op_near_exact():
    x = Tensor(np.random.default_rng(1).normal(size=(5,)))
    report = gradcheck(lambda t: (t * 3.0).sum(), [x], name="linear")
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_gradcheck_detects_corrupted_gradient():
    """Negative control: a deliberately scaled backward must fail by name."""
    x = Tensor(np.random.default_rng(2).uniform(-1, 1, (5,)))
    w = np.random.default_rng(3).normal(size=(5,))
    dc.corrupt_gradient("sigmoid", 1.01)
    try:
        report = gradcheck(lambda t: (dc.sigmoid(t) * w).sum(), [x], name="sigmoid")
    finally:
        dc.clear_gradient_corruption()
    assert not report.passed
    assert report.max_rel_err > 1e-4


def test_gradcheck_reports_non_finite_coordinate():
    x = Tensor(np.array([0.5, 1e-7]))

    def fragile(t):
        return dc.log(t).sum()  # goes non-finite when a coordinate crosses 0

    report = gradcheck(fragile, [x], eps=1e-5, name="fragile_log")
    assert not report.passed
    assert report.non_finite_at is not None
    assert report.non_finite_at[1] == 1  # names the offending coordinate


def test_gradcheck_requires_double_precision():
    x = Tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(ValueError):
        gradcheck(lambda t: t.sum(), [x])
