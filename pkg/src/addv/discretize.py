"""Representative disparity values for N bins.

Three strategies: uniform spacing (bin centers grow linearly), log-uniform
spacing (widths grow exponentially toward far range), and the adaptive
strategy where per-image bin widths come out of a network and are turned
into representative values by sigmoid, prefix sum, and max normalization.
Constant widths make the adaptive strategy collapse to uniform bin edges of
(0,1], so the fixed strategies are special cases of it.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError

UD = "UD"
SID = "SID"
ADAPTIVE = "ADAPTIVE"

# Default normalized-disparity range for the fixed strategies.  The lower
# bound is kept positive so the log-space strategy is always well-defined.
DEFAULT_RANGE = (0.01, 1.0)


@dataclass(frozen=True)
class DisparityRange:
    """Closed disparity interval [lo, hi] in normalized units."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi):
            raise ValueError(f"need 0 <= lo < hi, got [{self.lo}, {self.hi}]")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("disparity range must be finite")


@dataclass
class BinPartition:
    """N representative disparity values per image, strictly increasing.

    ``values`` is a tensor whose last axis indexes bins; a leading batch axis
    carries per-image partitions.  Adaptive partitions end exactly at 1 and
    stay differentiable with respect to the logits that produced them.
    """

    values: Tensor
    strategy: str = ADAPTIVE
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.values = dc.as_tensor(self.values)
        if self.strategy not in (UD, SID, ADAPTIVE):
            raise ValueError(f"unknown strategy tag {self.strategy!r}")
        if self.validate:
            v = self.values.data
            if v.ndim == 0 or v.shape[-1] < 1:
                raise ShapeError(f"partition needs at least one bin, got shape {v.shape}")
            if np.any(np.diff(v, axis=-1) <= 0):
                raise ValueError("bin values must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return self.values.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.values.data

    def to_csv(self) -> str:
        """Serialize a single partition as 'index,value' rows (1-based)."""
        v = self.values.data
        if v.ndim != 1:
            raise ShapeError(f"to_csv expects a single partition, got shape {v.shape}")
        buf = io.StringIO()
        buf.write("index,value\n")
        for i, x in enumerate(v, start=1):
            buf.write(f"{i},{float(x)!r}\n")
        return buf.getvalue()


def uniform_bins(n: int, rng: DisparityRange | None = None) -> BinPartition:
    """Centers of N equal-width bins spanning the range."""
    if n < 1:
        raise ValueError(f"need at least one bin, got {n}")
    rng = rng or DisparityRange(*DEFAULT_RANGE)
    step = (rng.hi - rng.lo) / n
    values = rng.lo + (np.arange(1, n + 1) - 0.5) * step
    return BinPartition(Tensor(values), strategy=UD)


def sid_bins(n: int, rng: DisparityRange | None = None) -> BinPartition:
    """Log-space centers of N bins whose edges are log-uniform.

    Edges are exp(ln lo + (i/N) ln(hi/lo)); each representative value is the
    geometric mean of its bin's edges, so successive values share a constant
    ratio.
    """
    if n < 1:
        raise ValueError(f"need at least one bin, got {n}")
    rng = rng or DisparityRange(*DEFAULT_RANGE)
    if rng.lo <= 0.0:
        raise ValueError(f"log-space bins need lo > 0, got {rng.lo}")
    log_lo, log_hi = np.log(rng.lo), np.log(rng.hi)
    edges = np.exp(log_lo + np.arange(n + 1) / n * (log_hi - log_lo))
    values = np.exp((np.log(edges[:-1]) + np.log(edges[1:])) / 2.0)
    return BinPartition(Tensor(values), strategy=SID)


def sid_edges(n: int, rng: DisparityRange | None = None) -> np.ndarray:
    """The N+1 log-uniform bin edges (diagnostic companion to sid_bins)."""
    rng = rng or DisparityRange(*DEFAULT_RANGE)
    if rng.lo <= 0.0:
        raise ValueError(f"log-space bins need lo > 0, got {rng.lo}")
    return np.exp(np.log(rng.lo) + np.arange(n + 1) / n * np.log(rng.hi / rng.lo))


def adaptive_bins(width_logits: Tensor) -> BinPartition:
    """Turn per-image width logits (..,N,1,1) into representative values.

    sigmoid makes relative widths positive, the channel prefix sum makes the
    values strictly increasing, and dividing by the last entry pins the top
    value to exactly 1.  The whole map is differentiable in the logits.
    """
    width_logits = dc.as_tensor(width_logits)
    if width_logits.ndim < 3 or width_logits.shape[-2:] != (1, 1):
        raise ShapeError(f"adaptive_bins: expected (..,N,1,1) logits, got {width_logits.shape}")
    widths = dc.sigmoid(width_logits)
    csum = dc.cumsum_channels(widths)
    flat = dc.reshape(csum, csum.shape[:-2])  # (.., N)
    values = flat / flat[..., -1:]
    return BinPartition(values, strategy=ADAPTIVE)
