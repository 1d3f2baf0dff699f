"""Training objectives: photometric reconstruction with minimum reprojection
and auto-masking, edge-aware smoothness, and the uniformizing regularizers
that balance how much probability mass each disparity bin receives.

All losses accept an optional leading batch axis.  The loss of a batch is
the mean over images; an image whose auto-mask rejects every pixel
contributes zero and is flagged (never 0/0).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .ddv import ProbabilityVolume
from .diffcore import Tensor
from .errors import ShapeError

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossConfig:
    """Weights and toggles of the objective.

    alpha1 mixes the structural-similarity and L1 photometric terms, alpha2
    weights smoothness, alpha3 weights the uniformizing term, tau is the
    sharpening temperature.  Turning sharpening off forces tau = 1; turning
    uniformizing off removes its term entirely.  The deviation norm of the
    uniformizing losses defaults to the squared penalty: an absolute-value
    reading keeps a constant-magnitude gradient arbitrarily close to the
    uniform average, which in practice flattens every per-pixel distribution
    and freezes the soft-argmax; "abs" stays available for comparison.
    """

    alpha1: float = 0.85
    alpha2: float = 1e-3
    alpha3: float = 1.0
    tau: float = 0.5
    uniformizing_variant: str = "v2"  # v1 is a non-differentiable diagnostic
    uniformizing: bool = True
    sharpening: bool = True
    uniformizing_norm: str = "squared"  # or "abs"

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ValueError(f"alpha1 must be in [0,1], got {self.alpha1}")
        if self.alpha2 < 0 or self.alpha3 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0,1], got {self.tau}")
        if self.uniformizing_variant not in ("v1", "v2"):
            raise ValueError(f"unknown uniformizing variant {self.uniformizing_variant!r}")
        if self.uniformizing_norm not in ("abs", "squared"):
            raise ValueError(f"unknown uniformizing norm {self.uniformizing_norm!r}")

    @property
    def effective_tau(self) -> float:
        return self.tau if self.sharpening else 1.0


@dataclass
class LossBundle:
    """Per-term scalars and their weighted total, all kept as graph tensors
    so the total can be backpropagated.  c_valid counts auto-mask survivors;
    all_masked flags images that lost every pixel."""

    photometric: Tensor
    smoothness: Tensor
    uniformizing: Tensor
    total: Tensor
    c_valid: int
    all_masked: bool = False

    def floats(self) -> dict[str, float]:
        return {
            "L_p": float(self.photometric.data),
            "L_smooth": float(self.smoothness.data),
            "L_u": float(self.uniformizing.data),
            "L_final": float(self.total.data),
        }


def _pairify(a: Tensor, b: Tensor, op: str) -> tuple[Tensor, Tensor, bool]:
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    squeeze = a.ndim == 3
    if squeeze:
        a = dc.reshape(a, (1, *a.shape))
        b = dc.reshape(b, (1, *b.shape))
    if a.ndim != 4:
        raise ShapeError(f"{op}: expected (C,H,W) or (B,C,H,W), got {a.shape}")
    return a, b, squeeze


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel structural similarity with 3x3 mean-filter windows.

    Symmetric in its arguments and exactly 1 where they coincide.
    """
    a4, b4, squeeze = _pairify(a, b, "ssim")
    mu_a = dc.box_filter3(a4)
    mu_b = dc.box_filter3(b4)
    var_a = dc.box_filter3(a4 * a4) - mu_a * mu_a
    var_b = dc.box_filter3(b4 * b4) - mu_b * mu_b
    cov = dc.box_filter3(a4 * b4) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    out = num / den
    return dc.reshape(out, out.shape[1:]) if squeeze else out


def photometric_error(a: Tensor, b: Tensor, alpha1: float = 0.85) -> Tensor:
    """Blend of structural dissimilarity and L1, channel-averaged to (..,H,W).

    pe = alpha1 * clamp((1-SSIM)/2, 0, 1) + (1-alpha1) * |a-b|, always >= 0.
    """
    a4, b4, squeeze = _pairify(a, b, "photometric_error")
    dssim = dc.clamp((1.0 - ssim(a4, b4)) * 0.5, 0.0, 1.0)
    l1 = abs(a4 - b4)
    pe = (alpha1 * dssim + (1.0 - alpha1) * l1).mean(axis=1)
    return dc.reshape(pe, pe.shape[1:]) if squeeze else pe


def _per_image_masked_mean(values: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean of ``values`` over mask=1 pixels, one scalar per image.

    Images with an empty mask yield exactly zero.  Returns the (B,) tensor
    and the per-image valid-pixel counts.
    """
    counts = mask.reshape(mask.shape[0], -1).sum(axis=1)
    safe = np.maximum(counts, 1)
    summed = (values * mask).sum(axis=(-2, -1))
    return summed / safe, counts


def identity_reprojection_error(
    target: Tensor, sources: list[Tensor], alpha1: float = 0.85
) -> np.ndarray:
    """Best raw photometric error against the unwarped sources (no grad)."""
    t = dc.as_tensor(target).detach()
    maps = [photometric_error(t, dc.as_tensor(s).detach(), alpha1).data for s in sources]
    return np.minimum.reduce(maps)


def min_reprojection_automask(
    target: Tensor,
    warped: list[Tensor],
    sources: list[Tensor],
    alpha1: float = 0.85,
    identity_pe: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray, bool]:
    """Pixel-wise minimum reprojection loss with the identity-reprojection
    auto-mask.

    A pixel survives iff the best warped error beats the best raw source
    error strictly; static scenes and occluded or low-texture pixels fail
    the test and drop out.  The mask is detached from all gradients.
    ``identity_pe`` can carry a precomputed identity error (it does not
    depend on the scale, so multi-scale callers share one).
    Returns (scalar loss, (B,H,W) mask, all-masked flag).
    """
    if not warped or len(warped) != len(sources):
        raise ValueError("need at least one source and as many warped frames")
    t4 = dc.as_tensor(target)
    squeeze = t4.ndim == 3
    pe_warp = [photometric_error(t4, w, alpha1) for w in warped]
    min_warp = pe_warp[0]
    for p in pe_warp[1:]:
        min_warp = dc.minimum(min_warp, p)
    min_ident = identity_pe if identity_pe is not None else \
        identity_reprojection_error(t4, sources, alpha1)

    min_warp_b = dc.reshape(min_warp, (1, *min_warp.shape)) if squeeze else min_warp
    mask = (min_warp_b.data < min_ident.reshape(min_warp_b.shape)).astype(np.float64)
    per_image, counts = _per_image_masked_mean(min_warp_b, mask)
    all_masked = bool((counts == 0).any())
    if all_masked:
        logger.warning("auto-mask removed every pixel of %d image(s); their L_p is 0",
                       int((counts == 0).sum()))
    loss = per_image.mean()
    return loss, (mask[0] if squeeze else mask), all_masked


def edge_smoothness(disp: Tensor, img: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity.

    Forward differences of disp/mean(disp), down-weighted where the image
    has strong gradients; invariant to scaling the disparity.
    """
    disp = dc.as_tensor(disp)
    img = dc.as_tensor(img)
    squeeze = disp.ndim == 2
    if squeeze:
        disp = dc.reshape(disp, (1, *disp.shape))
        img = dc.reshape(img, (1, *img.shape))
    if disp.ndim != 3 or img.ndim != 4 or img.shape[-2:] != disp.shape[-2:]:
        raise ShapeError(f"edge_smoothness: got disp {disp.shape}, img {img.shape}")
    mean_disp = disp.mean(axis=(-2, -1), keepdims=True)
    if np.any(mean_disp.data <= 0.0):
        raise ValueError("edge_smoothness: disparity must have positive mean")
    d = disp / mean_disp

    dx = abs(d[:, :, 1:] - d[:, :, :-1])
    dy = abs(d[:, 1:, :] - d[:, :-1, :])
    ix = abs(img[:, :, :, 1:] - img[:, :, :, :-1]).mean(axis=1)
    iy = abs(img[:, :, 1:, :] - img[:, :, :-1, :]).mean(axis=1)

    terms = []
    if dx.size:
        terms.append((dx * dc.exp(-ix)).mean(axis=(-2, -1)))
    if dy.size:
        terms.append((dy * dc.exp(-iy)).mean(axis=(-2, -1)))
    if not terms:
        return dc.as_tensor(0.0)
    per_image = terms[0]
    for t in terms[1:]:
        per_image = per_image + t
    return per_image.mean()


def _deviation(x: Tensor, target: float, norm: str) -> Tensor:
    d = x - target
    return abs(d) if norm == "abs" else d * d


def uniformizing_v1(pv: ProbabilityVolume, mask: np.ndarray, norm: str = "squared") -> float:
    """Count-based balance diagnostic: how far the per-bin share of argmax
    assignments sits from 1/N, summed over bins.

    Not differentiable (it only sees argmax indices); exposed for ablation
    and diagnostics.  Rejects an empty mask.
    """
    probs = pv.probs.data
    squeeze = probs.ndim == 3
    if squeeze:
        probs = probs[None]
        mask = np.asarray(mask)[None]
    n = probs.shape[1]
    mask = np.asarray(mask, dtype=bool).reshape(probs.shape[0], *probs.shape[2:])
    totals = []
    for b in range(probs.shape[0]):
        m = mask[b].ravel()
        c_valid = int(m.sum())
        if c_valid == 0:
            raise ValueError("uniformizing_v1: no valid pixels")
        idx = probs[b].reshape(n, -1).argmax(axis=0)[m]
        counts = np.bincount(idx, minlength=n)
        dev = counts / c_valid - 1.0 / n
        totals.append(float(np.sum(np.abs(dev) if norm == "abs" else dev * dev)))
    return float(np.mean(totals))


def uniformizing_v2_masked(
    pv: ProbabilityVolume, mask: np.ndarray, norm: str = "squared"
) -> tuple[Tensor, bool]:
    """Distribution-based balance loss on auto-mask survivors.

    Averages each bin's probability over valid pixels and penalizes the
    deviation of that average from 1/N.  Zero exactly when the averaged
    distribution is uniform; differentiable through the volume.  An image
    with no valid pixels contributes zero and raises the flag.
    """
    probs = pv.probs
    squeeze = probs.ndim == 3
    if squeeze:
        probs = dc.reshape(probs, (1, *probs.shape))
        mask = np.asarray(mask)[None]
    bsz, n = probs.shape[0], probs.shape[1]
    mask = np.asarray(mask, dtype=np.float64).reshape(bsz, 1, *probs.shape[2:])
    counts = mask[:, 0].reshape(bsz, -1).sum(axis=1)
    empty = counts == 0
    if empty.any():
        logger.warning("uniformizing: %d image(s) fully masked, contributing 0", int(empty.sum()))
    safe = np.maximum(counts, 1.0).reshape(bsz, 1)
    p_avg = (probs * mask).sum(axis=(-2, -1)) / safe  # (B,N)
    dev = _deviation(p_avg, 1.0 / n, norm).sum(axis=1)  # (B,)
    keep = (~empty).astype(np.float64)
    loss = (dev * keep).sum() / max(int((~empty).sum()), 1)
    return loss, bool(empty.any())


def total_loss(
    photometric: Tensor,
    smoothness: Tensor,
    uniformizing: Tensor,
    config: LossConfig,
    c_valid: int = 0,
    all_masked: bool = False,
) -> LossBundle:
    """Combine already scale-averaged terms into the weighted objective."""
    photometric = dc.as_tensor(photometric)
    smoothness = dc.as_tensor(smoothness)
    uniformizing = dc.as_tensor(uniformizing)
    if not config.uniformizing:
        uniformizing = dc.as_tensor(0.0)
    total = photometric + config.alpha2 * smoothness + config.alpha3 * uniformizing
    return LossBundle(
        photometric=photometric, smoothness=smoothness, uniformizing=uniformizing,
        total=total, c_valid=c_valid, all_masked=all_masked,
    )


def _nearest_indices(full: int, small: int) -> np.ndarray:
    factor = full // small
    return np.minimum(np.arange(small) * factor + factor // 2, full - 1)


def downsample_mask_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor reduction of a (..,H,W) mask to (..,h,w)."""
    rows = _nearest_indices(mask.shape[-2], h)
    cols = _nearest_indices(mask.shape[-1], w)
    return mask[..., rows[:, None], cols[None, :]]


def multi_scale_loss(
    target: Tensor,
    sources: list[Tensor],
    warped_per_scale: list[list[Tensor]],
    disps_full: list[Tensor],
    volumes: list[ProbabilityVolume],
    config: LossConfig,
) -> LossBundle:
    """The full objective over decoder scales.

    ``warped_per_scale[s][j]`` reconstructs the target from source j using
    scale s's disparity, already at full resolution (disparities are
    upsampled before warping).  Per-scale terms are averaged with equal
    weights, then combined.  The uniformizing term of scale s is computed on
    that scale's probability volume under the full-resolution auto-mask
    downsampled by nearest neighbor.
    """
    n_scales = len(disps_full)
    n_src = len(sources)
    bsz = target.shape[0]
    lp_terms, ls_terms, lu_terms = [], [], []
    c_valid_total = 0
    any_all_masked = False
    use_v2 = config.uniformizing_variant == "v2"
    identity_pe = identity_reprojection_error(target, sources, config.alpha1)

    # One photometric-error evaluation covers every scale and source; the
    # per-scale minima and masks are sliced out of it afterwards.
    flat_warped = [warped_per_scale[s][j] for s in range(n_scales) for j in range(n_src)]
    warped_all = dc.concat(flat_warped, axis=0)
    target_all = dc.concat([target] * (n_scales * n_src), axis=0)
    pe_all = photometric_error(target_all, warped_all, config.alpha1)

    masks = []
    for s in range(n_scales):
        min_warp = pe_all[(s * n_src) * bsz : (s * n_src + 1) * bsz]
        for j in range(1, n_src):
            nxt = pe_all[(s * n_src + j) * bsz : (s * n_src + j + 1) * bsz]
            min_warp = dc.minimum(min_warp, nxt)
        mask = (min_warp.data < identity_pe).astype(np.float64)
        per_image, counts = _per_image_masked_mean(min_warp, mask)
        if (counts == 0).any():
            any_all_masked = True
            logger.warning("auto-mask removed every pixel of %d image(s); their L_p is 0",
                           int((counts == 0).sum()))
        c_valid_total += int(mask.sum())
        masks.append(mask)
        lp_terms.append(per_image.mean())
        ls_terms.append(edge_smoothness(disps_full[s], target))
    if config.uniformizing:
        for s in range(n_scales):
            pv = volumes[s]
            hs, ws = pv.probs.shape[-2:]
            mask_s = downsample_mask_nearest(masks[s], hs, ws)
            if use_v2:
                lu, flag_u = uniformizing_v2_masked(pv, mask_s, config.uniformizing_norm)
                any_all_masked |= flag_u
            else:
                if mask_s.sum() == 0:
                    lu = dc.as_tensor(0.0)
                    any_all_masked = True
                else:
                    lu = dc.as_tensor(uniformizing_v1(pv, mask_s, config.uniformizing_norm))
            lu_terms.append(lu)

    def avg(terms):
        if not terms:
            return dc.as_tensor(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc / float(len(terms))

    return total_loss(
        avg(lp_terms), avg(ls_terms), avg(lu_terms), config,
        c_valid=c_valid_total, all_masked=any_all_masked,
    )
