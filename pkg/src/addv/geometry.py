"""Pinhole camera model, SE(3) pose, and the differentiable inverse warp.

The warp reconstructs the target frame from a source frame: back-project
each target pixel with its depth, move it by the relative pose, re-project
with the intrinsics, and sample the source there bilinearly.  Pixels that
land outside the source image or behind the camera are flagged in a validity
mask instead of raising.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError

# Pixels projecting closer than this are treated as behind the camera.
MIN_PROJECT_Z = 1e-6

# disparity in (0,1] maps to depth = 1/(a*disp + b) spanning [MIN_DEPTH, MAX_DEPTH).
MIN_DEPTH = 0.1
MAX_DEPTH = 100.0


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera after resizing the image by factor."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                self.cx * factor, self.cy * factor)


@dataclass
class PoseSE3:
    """6-DoF relative pose: axis-angle rotation (radians * unit axis) plus a
    translation in scene units.  Fields may be tensors so a pose network's
    output stays differentiable, or plain arrays for ground-truth poses."""

    axis_angle: Tensor
    translation: Tensor

    def __post_init__(self):
        self.axis_angle = dc.as_tensor(self.axis_angle)
        self.translation = dc.as_tensor(self.translation)
        if self.axis_angle.shape[-1] != 3 or self.translation.shape[-1] != 3:
            raise ShapeError(
                f"pose needs (..,3) fields, got {self.axis_angle.shape} / {self.translation.shape}"
            )

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(Tensor(np.zeros(3)), Tensor(np.zeros(3)))

    def matrix(self) -> Tensor:
        return se3_exp(self.axis_angle, self.translation)


def se3_exp(axis_angle: Tensor, translation: Tensor) -> Tensor:
    """Rodrigues rotation plus translation as a (..,4,4) transform.

    Differentiable in both arguments; below a rotation magnitude of 1e-6 the
    sin(t)/t style coefficients switch to their series expansions, which are
    exact to double precision there.
    """
    w = dc.as_tensor(axis_angle)
    t = dc.as_tensor(translation)
    squeeze = w.ndim == 1
    if squeeze:
        w = dc.reshape(w, (1, 3))
        t = dc.reshape(t, (1, 3))
    if w.shape != t.shape or w.shape[-1] != 3:
        raise ShapeError(f"se3_exp: need matching (B,3) inputs, got {w.shape}, {t.shape}")

    wx, wy, wz = w[:, 0:1], w[:, 1:2], w[:, 2:3]
    theta_sq = (w * w).sum(axis=1, keepdims=True)
    small = theta_sq.data < 1e-12
    # The guarded sqrt keeps the unselected branch finite at theta -> 0.
    theta = dc.sqrt(theta_sq + 1e-24)
    a = dc.where(small, 1.0 - theta_sq / 6.0, dc.sin(theta) / theta)
    b = dc.where(small, 0.5 - theta_sq / 24.0, (1.0 - dc.cos(theta)) / (theta_sq + 1e-24))
    c = 1.0 - b * theta_sq

    rows = [
        dc.concat([c + b * wx * wx, b * wx * wy - a * wz, b * wx * wz + a * wy, t[:, 0:1]], axis=1),
        dc.concat([b * wx * wy + a * wz, c + b * wy * wy, b * wy * wz - a * wx, t[:, 1:2]], axis=1),
        dc.concat([b * wx * wz - a * wy, b * wy * wz + a * wx, c + b * wz * wz, t[:, 2:3]], axis=1),
    ]
    bottom = Tensor(np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), (w.shape[0], 4)).copy())
    mat = dc.stack(rows + [bottom], axis=1)
    return dc.reshape(mat, (4, 4)) if squeeze else mat


def _pixel_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return u, v


def _as_batched_map(depth: Tensor) -> tuple[Tensor, bool]:
    depth = dc.as_tensor(depth)
    if depth.ndim == 2:
        return dc.reshape(depth, (1, *depth.shape)), True
    if depth.ndim == 3:
        return depth, False
    raise ShapeError(f"depth must be (H,W) or (B,H,W), got {depth.shape}")


def compute_sample_grid(
    depth: Tensor, pose: PoseSE3, intrinsics: CameraIntrinsics
) -> tuple[Tensor, np.ndarray]:
    """Continuous source-pixel coordinates for every target pixel.

    Returns a (B,H,W,2) grid of (u,v) plus a validity mask that is False
    where the moved point lies behind the camera.  Scaling depth and
    translation together leaves the grid unchanged (the projective scale
    ambiguity that median scaling later absorbs).
    """
    depth_b, squeeze = _as_batched_map(depth)
    if np.any(depth_b.data <= 0.0):
        raise ValueError("compute_sample_grid: depth must be positive everywhere")
    bsz, h, w = depth_b.shape
    mat = pose.matrix()
    if mat.ndim == 2:
        mat = dc.reshape(mat, (1, 4, 4))
    if mat.shape[0] not in (1, bsz):
        raise ShapeError(f"pose batch {mat.shape[0]} incompatible with depth batch {bsz}")

    u, v = _pixel_coords(h, w)
    xdir = (u - intrinsics.cx) / intrinsics.fx
    ydir = (v - intrinsics.cy) / intrinsics.fy

    x = depth_b * xdir
    y = depth_b * ydir
    z = depth_b

    def entry(i, j):
        e = mat[:, i : i + 1, j : j + 1]  # (B,1,1) broadcasts over H,W
        return e if mat.shape[0] == bsz else dc.reshape(e, (1, 1, 1))

    x2 = entry(0, 0) * x + entry(0, 1) * y + entry(0, 2) * z + entry(0, 3)
    y2 = entry(1, 0) * x + entry(1, 1) * y + entry(1, 2) * z + entry(1, 3)
    z2 = entry(2, 0) * x + entry(2, 1) * y + entry(2, 2) * z + entry(2, 3)

    valid = z2.data > MIN_PROJECT_Z
    z_safe = dc.clamp(z2, lo=MIN_PROJECT_Z)
    us = intrinsics.fx * (x2 / z_safe) + intrinsics.cx
    vs = intrinsics.fy * (y2 / z_safe) + intrinsics.cy
    grid = dc.stack([us, vs], axis=-1)
    if squeeze:
        valid = valid[0]
    return grid, valid


def inverse_warp(
    src: Tensor, depth: Tensor, pose: PoseSE3, intrinsics: CameraIntrinsics
) -> tuple[Tensor, np.ndarray]:
    """Reconstruct the target frame by sampling ``src`` at the moved pixels.

    Differentiable with respect to the source image, the depth map, and the
    pose.  The mask is False where the projection left the source image or
    went behind the camera.
    """
    src = dc.as_tensor(src)
    squeeze = src.ndim == 3
    if squeeze:
        src = dc.reshape(src, (1, *src.shape))
    if src.ndim != 4:
        raise ShapeError(f"src must be (C,H,W) or (B,C,H,W), got {src.shape}")
    depth_b, _ = _as_batched_map(depth)
    grid, proj_valid = compute_sample_grid(depth_b, pose, intrinsics)
    warped, sample_valid = dc.bilinear_sample(src, grid)
    valid = proj_valid.reshape(sample_valid.shape) & sample_valid
    if squeeze:
        return dc.reshape(warped, warped.shape[1:]), valid[0]
    return warped, valid


def disp_to_depth(disp: Tensor) -> Tensor:
    """Map normalized disparity in (0,1] to depth in scene units.

    depth = 1/(a*disp + b) with a, b chosen so depth spans
    [MIN_DEPTH, MAX_DEPTH] as disparity spans [1, 0].
    """
    a = 1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH
    b = 1.0 / MAX_DEPTH
    disp = dc.as_tensor(disp)
    return 1.0 / (disp * a + b)


def depth_to_disp(depth: np.ndarray) -> np.ndarray:
    """Inverse of disp_to_depth on plain arrays (reporting helper)."""
    a = 1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH
    b = 1.0 / MAX_DEPTH
    return (1.0 / np.asarray(depth) - b) / a
