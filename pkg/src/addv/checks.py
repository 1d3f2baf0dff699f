"""Named gradient-verification suites.

Three scopes: ``ops`` covers every differentiable primitive, ``losses``
covers the composite objectives (including the full weighted loss on a
two-pixel toy problem), and ``e2e`` pushes finite differences through the
depth and pose networks into the final loss on a small crop.  All suites
run in double precision; inputs are seeded and chosen away from the kinks
of |x|, min, and the auto-mask so the checked points are generic.
"""
from __future__ import annotations

import numpy as np

from . import ddv, diffcore as dc, losses, nets
from .diffcore import GradCheckReport, Tensor, gradcheck
from .discretize import adaptive_bins
from .geometry import CameraIntrinsics, PoseSE3, disp_to_depth, inverse_warp, se3_exp
from .losses import LossConfig, multi_scale_loss

SCOPES = ("ops", "losses", "e2e")


def _rng(seed=7):
    return np.random.default_rng(seed)


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape))


def _const(rng, shape):
    return rng.normal(size=shape)


def op_checks() -> list[tuple[str, callable]]:
    """(name, runner) pairs for every differentiable primitive."""
    checks = []

    def add_check(name, fn, inputs, eps=1e-6, tol=1e-4, max_coords=96):
        checks.append(
            (name, lambda: gradcheck(fn, inputs, eps=eps, tol=tol, name=name,
                                     max_coords_per_input=max_coords))
        )

    rng = _rng()
    w5 = _const(rng, (5,))
    a5, b5 = _t(rng, (5,)), _t(rng, (5,))
    add_check("elementwise_suite",
              lambda a, b: (a * b + (a - b) / (dc.sigmoid(b) + 1.5) + abs(a) * w5
                            + dc.exp(a) + dc.log(abs(b) + 1.2)
                            + dc.minimum(a, b) + dc.maximum(a * 2.0, b)).sum(),
              [a5, b5])

    x, wgt, bias = _t(rng, (1, 2, 5, 5)), _t(rng, (3, 2, 3, 3)), _t(rng, (3,))
    wc = _const(rng, (1, 3, 5, 5))
    add_check("conv2d", lambda x, w, b: (dc.conv2d(x, w, b, 1, 1) * wc).sum(), [x, wgt, bias])
    x2, w2, b2 = _t(rng, (1, 2, 7, 7)), _t(rng, (2, 2, 3, 3)), _t(rng, (2,))
    wc2 = _const(rng, (1, 2, 4, 4))
    add_check("conv2d_stride2",
              lambda x, w, b: (dc.conv2d(x, w, b, 2, 1) * wc2).sum(), [x2, w2, b2])

    s7, ws7 = _t(rng, (7,)), _const(rng, (7,))
    add_check("sigmoid", lambda t: (dc.sigmoid(t) * ws7).sum(), [s7])

    y, wy = _t(rng, (4, 2, 3)), _const(rng, (4, 2, 3))
    add_check("softmax_tau", lambda t: (dc.softmax_tau(t, 0.5) * wy).sum(), [y])

    c8, wc8 = _t(rng, (8, 1, 1)), _const(rng, (8, 1, 1))
    add_check("cumsum_channels", lambda t: (dc.cumsum_channels(t) * wc8).sum(), [c8])

    g4, wg4 = _t(rng, (2, 3, 4, 5)), _const(rng, (2, 3, 1, 1))
    add_check("global_avg_pool", lambda t: (dc.global_avg_pool(t) * wg4).sum(), [g4])

    p4, wp4 = _t(rng, (2, 3, 4, 6)), _const(rng, (2, 3, 2, 3))
    add_check("avg_pool2", lambda t: (dc.avg_pool2(t) * wp4).sum(), [p4])

    u4, wu4 = _t(rng, (1, 2, 4, 4)), _const(rng, (1, 2, 8, 8))
    add_check("upsample_bilinear", lambda t: (dc.upsample_bilinear(t, 2) * wu4).sum(), [u4])

    img = _t(rng, (1, 2, 6, 6))
    grid = Tensor(rng.uniform(0.7, 4.3, (1, 3, 3, 2)))
    wsamp = _const(rng, (1, 2, 3, 3))

    def sample_fn(i, g):
        out, _ = dc.bilinear_sample(i, g)
        return (out * wsamp).sum()

    add_check("bilinear_sample", sample_fn, [img, grid])

    bx, wbx = _t(rng, (2, 5, 5)), _const(rng, (2, 5, 5))
    add_check("box_filter3", lambda t: (dc.box_filter3(t) * wbx).sum(), [bx])

    e5 = _t(rng, (5,))
    add_check("elu", lambda t: (dc.elu(t) * w5).sum(), [e5])
    return checks


def loss_checks() -> list[tuple[str, callable]]:
    checks = []

    def add_check(name, fn, inputs, eps=1e-6, tol=1e-4, max_coords=96):
        checks.append(
            (name, lambda: gradcheck(fn, inputs, eps=eps, tol=tol, name=name,
                                     max_coords_per_input=max_coords))
        )

    rng = _rng(11)
    logits8 = Tensor(rng.normal(size=(8, 1, 1)))
    wb8 = _const(rng, (8,))
    add_check("adaptive_bins", lambda t: (adaptive_bins(t).values * wb8).sum(), [logits8])

    ylog = Tensor(rng.normal(size=(4, 3, 3)))
    blog = Tensor(rng.normal(size=(4, 1, 1)))
    wd = _const(rng, (3, 3))

    def softargmax_fn(y, wl):
        pv = ddv.ProbabilityVolume(dc.softmax_tau(y, 0.5), tau=0.5)
        return (ddv.compose_softargmax(pv, adaptive_bins(wl)) * wd).sum()

    add_check("soft_argmax", softargmax_fn, [ylog, blog])

    a, b = _t(rng, (2, 5, 5), 0.1, 0.9), _t(rng, (2, 5, 5), 0.1, 0.9)
    wss = _const(rng, (2, 5, 5))
    add_check("ssim", lambda x, y: (losses.ssim(x, y) * wss).sum(), [a, b])
    wpe = _const(rng, (5, 5))
    add_check("photometric_error",
              lambda x, y: (losses.photometric_error(x, y, 0.85) * wpe).sum(), [a, b])

    disp = _t(rng, (6, 6), 0.2, 0.9)
    img = _t(rng, (3, 6, 6), 0.0, 1.0)
    add_check("edge_smoothness", lambda d: losses.edge_smoothness(d, img), [disp])

    mask = (rng.uniform(size=(4, 4)) > 0.3).astype(np.float64)
    ylog2 = Tensor(rng.normal(size=(5, 4, 4)))

    def uni_fn(y):
        pv = ddv.ProbabilityVolume(dc.softmax_tau(y, 0.5), tau=0.5)
        return losses.uniformizing_v2_masked(pv, mask)[0]

    add_check("uniformizing_v2", uni_fn, [ylog2])

    waa = _const(rng, (4, 4))
    add_check("se3_exp", lambda q, t: (se3_exp(q, t) * waa).sum(),
              [Tensor([0.03, -0.05, 0.02]), Tensor([0.1, -0.2, 0.15])])

    add_check("l_final_two_pixel", _two_pixel_loss_fn(), _two_pixel_inputs(), max_coords=None)
    return checks


def _two_pixel_inputs():
    rng = _rng(23)
    return [
        Tensor(rng.normal(size=(3, 1, 2)) * 0.5),      # probability logits
        Tensor(rng.normal(size=(3, 1, 1)) * 0.5),      # width logits
        Tensor(rng.uniform(0.2, 0.8, (2, 3, 1, 2))),   # two source frames
        Tensor(rng.uniform(0.3, 0.7, (1, 3, 1, 2))),   # target frame
    ]


def _two_pixel_loss_fn():
    intr = CameraIntrinsics(2.0, 2.0, 0.5, 0.0)
    pose_a = PoseSE3(np.array([0.0, 0.0, 0.01]), np.array([0.02, 0.0, 0.01]))
    pose_b = PoseSE3(np.array([0.0, 0.0, -0.01]), np.array([-0.02, 0.0, 0.0]))
    config = LossConfig()

    def fn(logits, width_logits, sources, target):
        pv = ddv.ProbabilityVolume(dc.softmax_tau(dc.reshape(logits, (1, 3, 1, 2)), 0.5),
                                   tau=0.5)
        bins = adaptive_bins(dc.reshape(width_logits, (1, 3, 1, 1)))
        disp = ddv.compose_softargmax(pv, bins)
        depth = disp_to_depth(disp)
        srcs = [sources[0:1], sources[1:2]]
        warped = []
        for src, pose in zip(srcs, (pose_a, pose_b)):
            w, _ = inverse_warp(src, depth, pose, intr)
            warped.append(w)
        bundle = multi_scale_loss(target, srcs, [warped], [disp], [pv], config)
        return bundle.total

    return fn


def e2e_checks() -> list[tuple[str, callable]]:
    """Finite differences through both networks into the final loss."""
    rng = _rng(31)
    depth_net = nets.DepthNet(n_bins=8, tau=0.5, seed=5)
    pose_net = nets.PoseNet(seed=6)
    target = Tensor(rng.uniform(0.2, 0.8, (1, 3, 16, 16)))
    sources = [Tensor(rng.uniform(0.2, 0.8, (1, 3, 16, 16))) for _ in range(2)]
    intr = CameraIntrinsics(12.0, 12.0, 7.5, 7.5)
    config = LossConfig()

    probe = {
        "input": target,
        "enc0.w": depth_net.parameters()["enc0.w"],
        "head0.prob_w": depth_net.parameters()["head0.prob_w"],
        "head0.width_w": depth_net.parameters()["head0.width_w"],
        "pose.pfinal.w": pose_net.parameters()["pfinal.w"],
    }

    def loss_fn(_probe):
        outs = depth_net.forward(target)
        poses = [pose_net.forward(target, src) for src in sources]
        disps_full, volumes, warped_per_scale = [], [], []
        for s, (disp, pv, _bins) in enumerate(outs):
            disp_full = dc.upsample_bilinear(disp, 2 ** s)
            depth = disp_to_depth(disp_full)
            warped = [inverse_warp(src, depth, poses[j], intr)[0]
                      for j, src in enumerate(sources)]
            disps_full.append(disp_full)
            volumes.append(pv)
            warped_per_scale.append(warped)
        return multi_scale_loss(target, sources, warped_per_scale,
                                disps_full, volumes, config).total

    checks = []
    for name, tensor in probe.items():
        checks.append((
            f"e2e_{name}",
            lambda t=tensor, n=name: gradcheck(
                loss_fn, [t], eps=1e-6, tol=1e-4, name=f"e2e_{n}",
                max_coords_per_input=12, seed=3,
            ),
        ))
    return checks


def run_scope(scope: str) -> list[GradCheckReport]:
    if scope == "ops":
        suite = op_checks()
    elif scope == "losses":
        suite = loss_checks()
    elif scope == "e2e":
        suite = e2e_checks()
    else:
        raise ValueError(f"unknown scope {scope!r}; pick one of {SCOPES}")
    return [runner() for _name, runner in suite]
