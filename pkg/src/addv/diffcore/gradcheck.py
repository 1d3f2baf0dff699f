"""Central finite-difference gradient verification.

The oracle is independent of the backward pass it checks: it re-evaluates the
forward function at perturbed inputs and compares (f(x+eps e) - f(x-eps e)) /
(2 eps) against the analytic gradient, coordinate by coordinate.  Double
precision inputs are required; the default eps of 1e-5 is unreliable in
single precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    """Outcome of one gradient check.

    max_rel_err is the largest per-coordinate deviation normalized by the
    overall gradient scale; when every gradient entry is near zero the raw
    absolute deviation is reported instead.
    """

    name: str
    passed: bool
    max_rel_err: float
    tol: float
    coords_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)
    non_finite_at: tuple[int, int] | None = None
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}, {self.coords_checked} coords)"
        if self.non_finite_at is not None:
            msg += f", non-finite value at input {self.non_finite_at[0]} coord {self.non_finite_at[1]}"
        return msg


def _select_coords(n: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, size=limit, replace=False))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "op",
    max_coords_per_input: int | None = 128,
    seed: int = 0,
) -> GradCheckReport:
    """Check the analytic gradient of ``fn`` against central differences.

    ``fn`` takes the given tensors and returns a tensor; non-scalar outputs
    are reduced to a scalar by summation.  Large inputs are checked on a
    seeded random subset of coordinates (``max_coords_per_input``).

    Returns a report; ``passed`` is True iff all checked coordinates agree
    within ``tol`` and no non-finite value was met.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError(f"gradcheck '{name}': inputs must be float64")
        t.requires_grad = True

    def scalar_eval() -> float:
        out = fn(*inputs)
        return float(out.data.sum())

    out = fn(*inputs)
    scalar = out.sum() if out.size != 1 else out
    scalar.backward()
    analytic = [
        (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in inputs
    ]

    diffs: list[tuple[int, int, float, float]] = []
    scale = 0.0
    coords_checked = 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        a_flat = analytic[i].reshape(-1)
        for c in _select_coords(flat.size, max_coords_per_input, rng):
            orig = flat[c]
            try:
                flat[c] = orig + eps
                f_plus = scalar_eval()
                flat[c] = orig - eps
                f_minus = scalar_eval()
            except NonFiniteError:
                flat[c] = orig
                return GradCheckReport(
                    name=name, passed=False, max_rel_err=float("inf"), tol=tol,
                    coords_checked=coords_checked, non_finite_at=(i, int(c)),
                )
            finally:
                flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(
                    name=name, passed=False, max_rel_err=float("inf"), tol=tol,
                    coords_checked=coords_checked, non_finite_at=(i, int(c)),
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[c])
            diffs.append((i, int(c), a, numeric))
            scale = max(scale, abs(a), abs(numeric))
            coords_checked += 1

    # Near-zero gradients are compared absolutely: dividing FD noise by a
    # vanishing scale would fail constant functions that are in fact exact.
    use_abs = scale < 1e-6
    max_err = 0.0
    worst = None
    failures = []
    for i, c, a, n in diffs:
        err = abs(a - n) if use_abs else abs(a - n) / scale
        if err > max_err:
            max_err, worst = err, (i, c)
        if err > tol:
            failures.append((i, c, a, n))

    return GradCheckReport(
        name=name, passed=not failures, max_rel_err=max_err, tol=tol,
        coords_checked=coords_checked, worst=worst, failures=failures,
    )
