"""Adaptive discrete disparity head.

Two branches consume the same feature map: a probability estimator turns it
into a per-pixel distribution over N bins (a 3x3 convolution followed by a
temperature softmax), and a bins generator turns it into N representative
disparity values (1x1 convolution, global average pooling, 1x1 convolution,
then the sigmoid/cumsum/max-normalization of ``discretize.adaptive_bins``).
A disparity map is composed from the two by soft-argmax; the hard argmax
decode is kept as a diagnostic only, since it cannot be trained through.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .discretize import BinPartition, adaptive_bins
from .errors import ShapeError


@dataclass
class AddvHead:
    """Parameters of one adaptive-disparity head.

    The probability estimator is a single 3x3 conv C -> N (zero padded to
    preserve resolution).  The bins generator is a 1x1 conv C -> N that
    aligns channels with the probability volume, global average pooling, and
    a 1x1 conv N -> N producing width logits.  When ``fixed_bins`` is set the
    bins generator is absent and the head always returns that partition
    (the uniform / log-uniform baselines).
    """

    n_bins: int
    tau: float = 0.5
    prob_w: Tensor = None
    prob_b: Tensor = None
    align_w: Tensor | None = None
    align_b: Tensor | None = None
    width_w: Tensor | None = None
    width_b: Tensor | None = None
    fixed_bins: BinPartition | None = None

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"head needs at least 2 bins, got {self.n_bins}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0,1], got {self.tau}")

    @property
    def in_channels(self) -> int:
        return self.prob_w.shape[1]

    @property
    def adaptive(self) -> bool:
        return self.fixed_bins is None

    def parameters(self) -> dict[str, Tensor]:
        named = {"prob_w": self.prob_w, "prob_b": self.prob_b}
        if self.adaptive:
            named.update(
                align_w=self.align_w, align_b=self.align_b,
                width_w=self.width_w, width_b=self.width_b,
            )
        return named


def make_head(
    in_channels: int,
    n_bins: int,
    tau: float = 0.5,
    rng: np.random.Generator | None = None,
    zero_init: bool = False,
    fixed_bins: BinPartition | None = None,
) -> AddvHead:
    """Build a head with Kaiming-uniform weights (or zeros as a test mode)."""

    def conv_param(cout, cin, k):
        if zero_init or rng is None:
            w = np.zeros((cout, cin, k, k))
        else:
            bound = np.sqrt(6.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, (cout, cin, k, k))
        return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)

    prob_w, prob_b = conv_param(n_bins, in_channels, 3)
    head = AddvHead(n_bins=n_bins, tau=tau, prob_w=prob_w, prob_b=prob_b,
                    fixed_bins=fixed_bins)
    if fixed_bins is None:
        head.align_w, head.align_b = conv_param(n_bins, in_channels, 1)
        head.width_w, head.width_b = conv_param(n_bins, n_bins, 1)
    elif fixed_bins.n_bins != n_bins:
        raise ShapeError(f"fixed partition has {fixed_bins.n_bins} bins, head expects {n_bins}")
    return head


@dataclass
class ProbabilityVolume:
    """Per-pixel distribution over N bins: probs is (..,N,H,W), every pixel's
    channel vector sums to 1 and the temperature that produced it is kept."""

    probs: Tensor
    tau: float
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.probs.ndim < 3:
            raise ShapeError(f"probability volume needs (..,N,H,W), got {self.probs.shape}")
        if self.validate:
            p = self.probs.data
            sums = p.sum(axis=-3)
            if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(p < 0.0) or np.any(p > 1.0):
                raise ValueError("channel vectors must be distributions (sum 1, entries in [0,1])")

    @property
    def n_bins(self) -> int:
        return self.probs.shape[-3]


def _check_features(x: Tensor, head: AddvHead) -> Tensor:
    x = dc.as_tensor(x)
    if x.ndim == 3:
        x = dc.reshape(x, (1, *x.shape))
    if x.ndim != 4:
        raise ShapeError(f"feature map must be (C,H,W) or (B,C,H,W), got {x.shape}")
    if x.shape[1] != head.in_channels:
        raise ShapeError(f"feature channels {x.shape[1]} != head channels {head.in_channels}")
    return x


def estimate_probability_volume(x: Tensor, head: AddvHead) -> ProbabilityVolume:
    """Logit map from the 3x3 conv, sharpened per-pixel softmax on top."""
    x4 = _check_features(x, head)
    logits = dc.conv2d(x4, head.prob_w, head.prob_b, stride=1, padding=1)
    if dc.as_tensor(x).ndim == 3:
        logits = dc.reshape(logits, logits.shape[1:])
    return ProbabilityVolume(dc.softmax_tau(logits, head.tau), tau=head.tau)


def generate_bins(x: Tensor, head: AddvHead) -> BinPartition:
    """Adaptive partition from the feature map, or the head's fixed one.

    Global average pooling collapses each image separately, so batch items
    never share bins but every pixel of one image sees the same partition.
    """
    squeeze = dc.as_tensor(x).ndim == 3
    x4 = _check_features(x, head)
    if not head.adaptive:
        values = head.fixed_bins.values
        if not squeeze:
            values = dc.reshape(values, (1, -1)) * np.ones((x4.shape[0], 1))
        return BinPartition(values, strategy=head.fixed_bins.strategy, validate=False)
    aligned = dc.conv2d(x4, head.align_w, head.align_b, stride=1, padding=0)
    pooled = dc.global_avg_pool(aligned)
    width_logits = dc.conv2d(pooled, head.width_w, head.width_b, stride=1, padding=0)
    if squeeze:
        width_logits = dc.reshape(width_logits, width_logits.shape[1:])
    return adaptive_bins(width_logits)


def compose_softargmax(pv: ProbabilityVolume, bins: BinPartition) -> Tensor:
    """Expected bin value per pixel: d(u,v) = sum_n b_n P_n(u,v).

    A convex combination, so the output always lies in [b_1, b_N.]
    """
    if pv.n_bins != bins.n_bins:
        raise ShapeError(f"bin count mismatch: volume {pv.n_bins} vs partition {bins.n_bins}")
    values = bins.values
    target = (*values.shape, 1, 1)
    weights = dc.reshape(values, target)
    return (pv.probs * weights).sum(axis=-3)


def compose_mle(pv: ProbabilityVolume, bins: BinPartition) -> np.ndarray:
    """Hard decode: the bin value at each pixel's most likely bin.

    Ties take the lower bin index.  Diagnostic only; argmax has no gradient.
    """
    if pv.n_bins != bins.n_bins:
        raise ShapeError(f"bin count mismatch: volume {pv.n_bins} vs partition {bins.n_bins}")
    idx = dc.argmax_channels(pv.probs)
    values = bins.values.data
    if values.ndim == 1:
        return values[idx]
    # batched: values is (B,N), idx is (B,H,W)
    return np.take_along_axis(values[:, :, None], idx.reshape(idx.shape[0], 1, -1), axis=1)[
        :, 0, :
    ].reshape(idx.shape)


def addv_forward(x: Tensor, head: AddvHead) -> tuple[Tensor, ProbabilityVolume, BinPartition]:
    """Full head: probability volume, bins, and the soft-argmax disparity.

    Resolution-insensitive: any H, W works and only the spatial extent of
    the outputs changes with it.
    """
    pv = estimate_probability_volume(x, head)
    bins = generate_bins(x, head)
    return compose_softargmax(pv, bins), pv, bins
