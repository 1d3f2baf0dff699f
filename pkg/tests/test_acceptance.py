"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line.  The reference quantitative results quoted for the full-scale setting
(32-bin adaptive volumes reaching AbsRel 0.119 / RMSE 4.922 / delta1 0.864
against a 0.128 / 5.137 / 0.846 continuous baseline on the standard driving
benchmark) are not reproducible at desk scale and are kept here as
documentation constants only; the executable criteria below are
property-based.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import time

import numpy as np
import pytest

from addv import checks, datagen as dg, ddv, diffcore as dc, trainer
from addv.ddv import ProbabilityVolume, compose_mle, compose_softargmax, make_head
from addv.diffcore import Tensor
from addv.discretize import BinPartition, adaptive_bins
from addv.errors import DivergenceError
from addv.geometry import CameraIntrinsics, PoseSE3, compute_sample_grid, inverse_warp
from addv.losses import LossConfig, photometric_error, uniformizing_v2_masked
from addv.trainer import TrainConfig, evaluate, metrics_from_depths, predict_depth, train

REFERENCE_FULL_SCALE = {  # documentation constants, not desk-reproducible
    "addv_32": {"abs_rel": 0.119, "rmse": 4.922, "delta1": 0.864},
    "baseline": {"abs_rel": 0.128, "rmse": 5.137, "delta1": 0.846},
}

TOY_SCENES = 200
TOY_HELD_OUT = 20
TOY_EPOCHS = 20
TOY_BINS = 32


def report(number, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number} {status}: {detail}")
    assert passed, f"criterion {number}: {detail}"


# -- criterion 1: gradient suite ---------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.time()
    reports = []
    for scope in ("ops", "losses", "e2e"):
        reports.extend(checks.run_scope(scope))
    elapsed = time.time() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_err for r in reports)
    report(
        1,
        not failed and elapsed < 120.0,
        f"{len(reports)} gradient checks, worst rel err {worst:.2e} (tol 1e-4), "
        f"{elapsed:.1f}s (< 120s); failures: {failed or 'none'}",
    )


# -- criterion 2: closed-form degenerates -------------------------------------------


def test_criterion_2_closed_form_degenerates():
    n = TOY_BINS
    head = make_head(7, n, tau=0.5, zero_init=True)
    x = Tensor(np.random.default_rng(0).uniform(size=(7, 12, 12)))
    disp, pv, bins = ddv.addv_forward(x, head)
    bins_err = np.abs(bins.numpy() - np.arange(1, n + 1) / n).max()
    disp_err = np.abs(disp.data - (n + 1) / (2 * n)).max()

    const_err = 0.0
    for c in (-0.7, 0.0, 1.3):
        b = adaptive_bins(Tensor(np.full((n, 1, 1), c)))
        const_err = max(const_err, np.abs(b.numpy() - np.arange(1, n + 1) / n).max())

    ok = bins_err < 1e-12 and disp_err < 1e-12 and const_err < 1e-12
    report(
        2, ok,
        f"zero-parameter head: bins off uniform by {bins_err:.2e}, disparity off "
        f"(N+1)/2N by {disp_err:.2e}; constant logits off uniform by {const_err:.2e} "
        f"(all < 1e-12)",
    )


# -- criterion 3: sharpening laws ---------------------------------------------------


def test_criterion_3_sharpening_laws():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(TOY_BINS, 8, 8)) * 2.0)
    bins = BinPartition(Tensor(np.sort(rng.uniform(0.02, 1.0, TOY_BINS))),
                        strategy="ADAPTIVE")
    taus = (1.0, 0.5, 0.25, 0.1)
    max_probs, gaps, argmaxes = [], [], []
    for tau in taus:
        pv = ProbabilityVolume(dc.softmax_tau(logits, tau), tau=tau)
        max_probs.append(pv.probs.data.max(axis=0))
        argmaxes.append(dc.argmax_channels(pv.probs))
        gaps.append(float(np.abs(compose_softargmax(pv, bins).data
                                 - compose_mle(pv, bins)).mean()))
    strictly_up = all(np.all(b > a) for a, b in zip(max_probs, max_probs[1:]))
    argmax_same = all(np.array_equal(a, argmaxes[0]) for a in argmaxes)
    gap_down = all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))
    report(
        3, strictly_up and argmax_same and gap_down,
        f"max-prob strictly increases along tau {taus}, argmax invariant, "
        f"|soft-argmax - MLE| non-increasing: {[round(g, 5) for g in gaps]}",
    )


# -- criterion 4: uniformizing laws -------------------------------------------------


def test_criterion_4_uniformizing_laws():
    rng = np.random.default_rng(2)
    nonneg = True
    for _ in range(10):
        pv = ProbabilityVolume(dc.softmax_tau(Tensor(rng.normal(size=(6, 4, 4))), 0.5),
                               tau=0.5)
        val = float(uniformizing_v2_masked(pv, np.ones((4, 4)))[0].data)
        nonneg &= val >= 0.0

    uniform_pv = ProbabilityVolume(Tensor(np.full((8, 3, 3), 1 / 8)), tau=1.0)
    at_uniform = float(uniformizing_v2_masked(uniform_pv, np.ones((3, 3)))[0].data)

    # averaged-to-uniform but individually peaked: still exactly zero
    probs = np.zeros((2, 1, 2))
    probs[0, 0, 0] = probs[1, 0, 1] = 1.0
    balanced = float(uniformizing_v2_masked(
        ProbabilityVolume(Tensor(probs), tau=1.0), np.ones((1, 2)))[0].data)

    # non-uniform average: strictly positive
    skew_pv = ProbabilityVolume(Tensor(np.array([0.75, 0.25]).reshape(2, 1, 1)), tau=1.0)
    at_skew = float(uniformizing_v2_masked(skew_pv, np.ones((1, 1)))[0].data)

    # 4-pixel fixture: masking must exclude flagged pixels exactly
    probs4 = np.zeros((2, 2, 2))
    probs4[0, 0, :] = 1.0  # row 0 (masked in): all mass on bin 1
    probs4[1, 1, :] = 1.0  # row 1 (masked out): all mass on bin 2
    pv4 = ProbabilityVolume(Tensor(probs4), tau=1.0, validate=False)
    half_mask = np.array([[1., 1.], [0., 0.]])
    masked_sq = float(uniformizing_v2_masked(pv4, half_mask)[0].data)
    masked_abs = float(uniformizing_v2_masked(pv4, half_mask, norm="abs")[0].data)
    full_val = float(uniformizing_v2_masked(pv4, np.ones((2, 2)))[0].data)

    ok = (nonneg and at_uniform < 1e-9 and balanced < 1e-9 and at_skew > 1e-9
          and abs(masked_sq - 0.5) < 1e-12 and abs(masked_abs - 1.0) < 1e-12
          and full_val < 1e-12)
    report(
        4, ok,
        f"L_u >= 0, zero iff averaged-uniform (uniform {at_uniform:.1e}, balanced "
        f"{balanced:.1e}, skew {at_skew:.3f} > 0); 4-pixel fixture: survivors only "
        f"(squared {masked_sq}, abs {masked_abs}) vs unmasked {full_val}",
    )


# -- criterion 5: geometry oracle ---------------------------------------------------


def test_criterion_5_geometry_oracle():
    fx, d, tx = 32.0, 16.0, 1.0
    intr = CameraIntrinsics(fx, fx, 15.5, 15.5)
    depth = Tensor(np.full((32, 32), d))
    pose = PoseSE3(Tensor(np.zeros(3)), Tensor([tx, 0.0, 0.0]))
    grid, _ = compute_sample_grid(depth, pose, intr)
    u = np.meshgrid(np.arange(32.0), np.arange(32.0))[0]
    shift_err = np.abs(grid.data[0, ..., 0] - u - fx * tx / d).max()

    worst_pe = 0.0
    for seed, layout in [(0, "two-plane"), (1, "two-plane"), (2, "two-plane"),
                         (2, "heightfield")]:
        t = dg.generate_triplet(dg.random_scene(seed, layout))
        pes, valids = [], []
        for j in (0, 1):
            warped, valid = inverse_warp(Tensor(t.sources[j]), Tensor(t.gt_depth),
                                         t.relative_pose(j), t.intrinsics)
            pes.append(photometric_error(Tensor(t.target), warped).data)
            valids.append(valid)
        # interior: in view in both warps, away from depth discontinuities
        # (bilinear sampling is ill-posed across occlusion edges)
        interior = valids[0] & valids[1] & ~dg.depth_discontinuity_mask(t.gt_depth)
        worst_pe = max(worst_pe, float(np.minimum(pes[0], pes[1])[interior].mean()))

    ok = shift_err < 1e-9 and worst_pe < 0.01
    report(
        5, ok,
        f"sample-grid shift off fx*tx/d by {shift_err:.2e} (< 1e-9); ground-truth "
        f"warp mean photometric error {worst_pe:.4f} (< 0.01) on interior pixels",
    )


# -- criterion 6: end-to-end toy training -------------------------------------------


@pytest.fixture(scope="module")
def toy_training(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_run")
    dataset = [dg.generate_triplet(dg.random_scene(s, "two-plane"))
               for s in range(TOY_SCENES)]
    config = TrainConfig(epochs=TOY_EPOCHS, n_bins=TOY_BINS, seed=0)
    t0 = time.time()
    result = train(dataset, config, out_dir=out)
    elapsed = time.time() - t0
    held_out = [dg.generate_triplet(dg.random_scene(10_000 + s, "two-plane"))
                for s in range(TOY_HELD_OUT)]
    return result, held_out, elapsed


def test_criterion_6_toy_training(toy_training):
    result, held_out, elapsed = toy_training

    finite = all(np.isfinite(list(row.values())).all() for row in result.history)
    l1, l20 = result.history[0]["L_final"], result.history[-1]["L_final"]
    halved = l20 < 0.5 * l1

    fractions = []
    for t in held_out:
        pred = predict_depth(result.depth_net, t)
        near = t.gt_depth == t.gt_depth.min()
        med_near = np.median(pred[near])
        med_far = np.median(pred[~near])
        threshold = (med_near + med_far) / 2.0
        frac = (np.sum(pred[near] < threshold) + np.sum(pred[~near] > threshold)) / pred.size
        fractions.append(frac if med_near < med_far else 1.0 - frac)
    ordering = float(np.mean(fractions))

    metrics, _ = evaluate(result.depth_net, held_out)
    baseline = float(np.mean([
        metrics_from_depths(np.full_like(t.gt_depth, 1.0), t.gt_depth)["abs_rel"]
        for t in held_out
    ]))
    improvement = 1.0 - metrics.abs_rel / baseline

    ok = (finite and halved and ordering > 0.9 and improvement >= 0.30
          and elapsed < 1800.0)
    report(
        6, ok,
        f"(a) no NaN over {TOY_EPOCHS} epochs; (b) L_final {l1:.4f} -> {l20:.4f} "
        f"({l20 / l1:.2f}x, need < 0.5); (c) plane ordering {ordering:.3f} (> 0.9); "
        f"(d) AbsRel {metrics.abs_rel:.4f} vs constant baseline {baseline:.4f}, "
        f"improvement {improvement:.0%} (>= 30%); runtime {elapsed / 60:.1f} min (< 30)",
    )


def test_uniformizing_trend_on_synthetic_run(toy_training):
    """With uniformizing on, the epoch-averaged regularizer keeps a
    non-increasing trend over the last five epochs.  At convergence it sits
    at a noise floor around 3e-4, so per-step monotonicity is asserted with
    10% slack and the window must not exceed the preceding one."""
    result, _held_out, _elapsed = toy_training
    lu = [row["L_u"] for row in result.history]
    window = lu[-5:]
    prior = lu[-10:-5]
    steps_ok = all(b <= a * 1.10 for a, b in zip(window, window[1:]))
    assert steps_ok, f"L_u rose beyond slack in the last 5 epochs: {window}"
    assert np.mean(window) <= np.mean(prior), (window, prior)


# -- criterion 7: ablation wiring ---------------------------------------------------


def test_criterion_7_ablation_wiring(tmp_path):
    """Completion-level wiring check on a subset of the toy corpus; the
    sharpening-only configuration may legitimately abort via the NaN guard."""
    dataset = [dg.generate_triplet(dg.random_scene(s, "two-plane")) for s in range(40)]
    outcomes = {}
    configs = {
        "u_on_s_off": LossConfig(uniformizing=True, sharpening=False),
        "u_off_s_off": LossConfig(uniformizing=False, sharpening=False),
        "u_off_s_on": LossConfig(uniformizing=False, sharpening=True),  # may abort
    }
    ok = True
    for name, loss_cfg in configs.items():
        cfg = TrainConfig(epochs=2, n_bins=TOY_BINS, seed=1, loss=loss_cfg)
        try:
            result = train(dataset, cfg, out_dir=tmp_path / name)
            outcomes[name] = f"completed (L_final {result.history[-1]['L_final']:.4f})"
        except DivergenceError:
            outcomes[name] = "nan-guard abort"
            if name != "u_off_s_on":
                ok = False
    report(7, ok, f"ablation outcomes: {outcomes} (nan-guard abort accepted for u_off_s_on)")


# -- criterion 8: evaluation protocol -----------------------------------------------


def test_criterion_8_evaluation_protocol():
    rng = np.random.default_rng(3)
    gt = rng.uniform(3.0, 15.0, (16, 16))
    pred = gt * rng.uniform(0.7, 1.4, (16, 16))
    base = metrics_from_depths(pred, gt, median_scaling=True)
    max_dev = 0.0
    for s in (0.1, 10.0):
        scaled = metrics_from_depths(pred * s, gt, median_scaling=True)
        max_dev = max(max_dev, max(abs(scaled[k] - base[k]) for k in base))

    fixture = metrics_from_depths(np.array([[1.0, 2.0]]), np.array([[2.0, 2.0]]),
                                  median_scaling=False)
    # pixel ratios are 2.0 and 1.0; 1.25^3 ~ 1.9531 < 2, so only the exact
    # pixel passes every delta threshold
    hand = {
        "abs_rel": 0.25,
        "sq_rel": 0.25,
        "rmse": np.sqrt(0.5),
        "rmse_log": np.sqrt(np.log(2.0) ** 2 / 2.0),
        "delta1": 0.5,
        "delta2": 0.5,
        "delta3": 0.5,
    }
    fixture_err = max(abs(fixture[k] - v) for k, v in hand.items())

    ok = max_dev < 1e-9 and fixture_err < 1e-12
    report(
        8, ok,
        f"median scaling invariant to global scales 0.1/10 within {max_dev:.1e} "
        f"(< 1e-9); two-pixel fixture matches hand-computed metrics within "
        f"{fixture_err:.1e}",
    )
