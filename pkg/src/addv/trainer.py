"""Optimization loop and evaluation protocol.

Each step runs the depth net on the center frame, the pose net against both
neighbors, warps both sources at every decoder scale, and descends the full
objective with Adam.  The learning rate drops once after a fixed epoch.  A
non-finite loss aborts training immediately (silently skipping bad batches
would mask the collapse that over-sharpening can cause) and the last good
checkpoint stays on disk.

Evaluation converts full-resolution disparity to depth, aligns the unknown
monocular scale per image by the ratio of ground-truth to predicted medians,
clamps depth, and averages the standard error/accuracy metrics over images.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import diffcore as dc
from .diffcore import Tensor
from .errors import DivergenceError, NonFiniteError, ShapeError
from .geometry import PoseSE3, disp_to_depth, inverse_warp
from .losses import LossConfig, multi_scale_loss
from .nets import DepthNet, PoseNet, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_p", "L_smooth", "L_u", "L_final", "lr")
DEPTH_CAP = 80.0
DEPTH_FLOOR = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    lr_decay_epoch: int = 15
    lr_after: float = 1e-5
    batch: int = 1
    seed: int = 0
    n_bins: int = 32
    strategy: str = "addv"
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"need at least one epoch, got {self.epochs}")
        if self.lr <= 0 or self.lr_after > self.lr:
            raise ValueError(f"need 0 < lr_after <= lr, got {self.lr_after}, {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch size must be positive, got {self.batch}")


@dataclass
class Metrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self):
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("accuracy fractions must be monotone in the threshold")

    def as_dict(self) -> dict[str, float]:
        return {
            "abs_rel": self.abs_rel, "sq_rel": self.sq_rel,
            "rmse": self.rmse, "rmse_log": self.rmse_log,
            "delta1": self.delta1, "delta2": self.delta2, "delta3": self.delta3,
        }


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per parameter and the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# -- training ----------------------------------------------------------------------


def _batch_tensors(triplets: list[dg.Triplet]):
    intr = triplets[0].intrinsics
    if any(t.intrinsics != intr for t in triplets):
        raise ShapeError("all triplets of a batch must share intrinsics")
    target = Tensor(np.stack([t.target for t in triplets]))
    sources = [Tensor(np.stack([t.sources[j] for t in triplets])) for j in range(2)]
    return target, sources, intr


def compute_batch_loss(
    triplets: list[dg.Triplet],
    depth_net: DepthNet,
    pose_net: PoseNet,
    config: LossConfig,
):
    """Forward pass plus the multi-scale objective for one batch.

    All scale/source warps run as one batched grid computation and one
    bilinear sample; the resulting frames feed the reference loss stack.
    """
    target, sources, intr = _batch_tensors(triplets)
    bsz = target.shape[0]
    n_src = len(sources)
    outs = depth_net.forward(target)
    n_scales = len(outs)

    # Both neighbors go through the pose net in a single batch.
    pose_pair = pose_net.forward(
        dc.concat([target] * n_src, axis=0), dc.concat(sources, axis=0)
    )

    disps_full = [dc.upsample_bilinear(outs[s][0], 2 ** s) for s in range(n_scales)]
    volumes = [outs[s][1] for s in range(n_scales)]
    depth_all = disp_to_depth(dc.concat(disps_full, axis=0))  # (n_scales*B,H,W)

    # Layout: source-major, then scale, then batch item.
    depth_rep = dc.concat([depth_all] * n_src, axis=0)
    src_rep = dc.concat(
        [dc.concat([src] * n_scales, axis=0) for src in sources], axis=0
    )
    aa = dc.concat([pose_pair.axis_angle[j * bsz : (j + 1) * bsz]
                    for j in range(n_src) for _ in range(n_scales)], axis=0)
    tr = dc.concat([pose_pair.translation[j * bsz : (j + 1) * bsz]
                    for j in range(n_src) for _ in range(n_scales)], axis=0)
    warped_all, _valid = inverse_warp(src_rep, depth_rep, PoseSE3(aa, tr), intr)

    warped_per_scale = [
        [warped_all[(j * n_scales + s) * bsz : (j * n_scales + s + 1) * bsz]
         for j in range(n_src)]
        for s in range(n_scales)
    ]
    bundle = multi_scale_loss(target, sources, warped_per_scale, disps_full, volumes, config)
    poses = [
        PoseSE3(pose_pair.axis_angle[j * bsz : (j + 1) * bsz],
                pose_pair.translation[j * bsz : (j + 1) * bsz])
        for j in range(n_src)
    ]
    return bundle, outs, poses


@dataclass
class TrainResult:
    depth_net: DepthNet
    pose_net: PoseNet
    history: list[dict[str, float]]
    checkpoint_path: Path | None
    log_path: Path | None


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr if epoch <= config.lr_decay_epoch else config.lr_after


def _augment_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def train(dataset, config: TrainConfig, out_dir=None, log_every: int = 0) -> TrainResult:
    """Train depth and pose networks jointly on a triplet dataset.

    Writes a checkpoint after every epoch and a CSV log with one row per
    epoch when ``out_dir`` is given.  Raises DivergenceError on a non-finite
    loss, leaving the newest completed checkpoint on disk.
    """
    triplets = list(dataset)
    if not triplets:
        raise ValueError("training needs a non-empty dataset")
    depth_net = DepthNet(
        n_bins=config.n_bins, tau=config.loss.effective_tau,
        strategy=config.strategy, seed=config.seed,
    )
    pose_net = PoseNet(seed=config.seed + 1)
    params = {f"depth.{k}": p for k, p in depth_net.parameters().items()}
    params.update({f"pose.{k}": p for k, p in pose_net.parameters().items()})
    state = AdamState()
    rng = np.random.default_rng(config.seed)

    ckpt_path = log_path = None
    extra = {"toggles": {"uniformizing": config.loss.uniformizing,
                         "sharpening": config.loss.sharpening}}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.ckpt"
        log_path = out_dir / "train_log.csv"
        save_checkpoint(ckpt_path, depth_net, pose_net, extra)
        log_path.write_text(",".join(LOG_COLUMNS) + "\n")

    history: list[dict[str, float]] = []
    for epoch in range(1, config.epochs + 1):
        lr = _epoch_lr(config, epoch)
        order = rng.permutation(len(triplets))
        sums = {"L_p": 0.0, "L_smooth": 0.0, "L_u": 0.0, "L_final": 0.0}
        steps = 0
        for start in range(0, len(order), config.batch):
            idx = order[start : start + config.batch]
            batch = [triplets[i] for i in idx]
            if config.augment:
                seeds = [_augment_seed(config.seed, epoch, int(i)) for i in idx]
                jittered = [dg.augment_jitter_only(t, s) for t, s in zip(batch, seeds)]
                # One flip decision per batch keeps intrinsics uniform.
                if dg.AugmentParams.draw(seeds[0]).flip:
                    jittered = [dg.flip_horizontal(t) for t in jittered]
                batch = jittered
            for p in params.values():
                p.grad = None
            try:
                bundle, _, _ = compute_batch_loss(batch, depth_net, pose_net, config.loss)
                total = float(bundle.total.data)
                if not np.isfinite(total):
                    raise NonFiniteError("loss is not finite")
                bundle.total.backward()
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"training diverged at epoch {epoch} step {steps}: {exc}; "
                    f"last good checkpoint is from the previous epoch"
                ) from exc
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, lr)
            for k, val in bundle.floats().items():
                sums[k] += val
            steps += 1
            if log_every and steps % log_every == 0:
                logger.info("epoch %d step %d L_final %.5f", epoch, steps, total)

        row = {"epoch": float(epoch), **{k: sums[k] / steps for k in sums}, "lr": lr}
        history.append(row)
        logger.info(
            "epoch %d: L_p %.5f L_smooth %.5f L_u %.5f L_final %.5f lr %.2e",
            epoch, row["L_p"], row["L_smooth"], row["L_u"], row["L_final"], lr,
        )
        if out_dir is not None:
            save_checkpoint(ckpt_path, depth_net, pose_net, extra)
            with open(log_path, "a", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([int(row["epoch"])] + [repr(row[c]) for c in LOG_COLUMNS[1:]])

    return TrainResult(depth_net, pose_net, history, ckpt_path, log_path)


# -- evaluation --------------------------------------------------------------------


def predict_depth(depth_net: DepthNet, triplet: dg.Triplet) -> np.ndarray:
    """Full-resolution head only; depth in scene units before any scaling."""
    disp, _pv, _bins = depth_net.forward(Tensor(triplet.target))[0]
    return disp_to_depth(disp).data


def metrics_from_depths(pred: np.ndarray, gt: np.ndarray, median_scaling: bool = True,
                        depth_cap: float = DEPTH_CAP) -> dict[str, float]:
    """Single-image metric row, optionally median-aligned."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if median_scaling:
        pred = pred * (np.median(gt) / np.median(pred))
    pred = np.clip(pred, DEPTH_FLOOR, depth_cap)
    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return {
        "abs_rel": float(np.mean(np.abs(diff) / gt)),
        "sq_rel": float(np.mean(diff ** 2 / gt)),
        "rmse": float(np.sqrt(np.mean(diff ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
    }


def evaluate(model, dataset, median_scaling: bool = True, depth_cap: float = DEPTH_CAP):
    """Average metrics over a dataset with ground truth.

    ``model`` is a DepthNet or a checkpoint path.  Returns (Metrics,
    per-image rows); raises if any triplet lacks ground truth.
    """
    if not isinstance(model, DepthNet):
        model, _pose, _meta = load_checkpoint(model)
    rows = []
    for i, triplet in enumerate(dataset):
        if triplet.gt_depth is None:
            raise ValueError(f"triplet {triplet.name or i} has no ground-truth depth")
        pred = predict_depth(model, triplet)
        row = metrics_from_depths(pred, triplet.gt_depth, median_scaling, depth_cap)
        row["name"] = triplet.name or f"{i:05d}"
        rows.append(row)
    if not rows:
        raise ValueError("evaluation needs at least one triplet")
    agg = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "name"}
    return Metrics(**agg), rows


def per_image_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["name", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"]
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in fields})
    return buf.getvalue()
