"""Synthetic scene generation, dataset IO, and augmentation.

Scenes are ray-cast analytically (no rasterization), so every frame of a
triplet samples the same continuous Lambertian texture under constant
illumination: photometric consistency holds by construction, and the ground
truth depth is the exact camera-space ray depth.  Two layouts exist, a
fronto-parallel foreground rectangle over a background plane (ground truth
takes exactly two values) and a smooth textured heightfield.

On disk a dataset is one directory per triplet holding frame_0.png,
frame_1.png, frame_2.png, an optional gt_depth.pfm, and intrinsics.json
with exactly the keys fx, fy, cx, cy, width, height.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geometry import CameraIntrinsics, PoseSE3

logger = logging.getLogger(__name__)

FRAME_NAMES = ("frame_0.png", "frame_1.png", "frame_2.png")
DEPTH_NAME = "gt_depth.pfm"
INTRINSICS_NAME = "intrinsics.json"
MIN_OVERLAP = 0.8

# World-unit texture wavelengths; the lower bound keeps the finest texture
# above ~8 px at the far end of the default depth range so bilinear warps
# stay photometrically consistent.  The near band is finer so a foreground
# plane shows mid-frequency texture too instead of a near-constant patch.
TEXTURE_WAVELENGTHS = (2.4, 6.5)
NEAR_TEXTURE_WAVELENGTHS = (1.0, 2.5)
TEXTURE_WAVES = 8


@dataclass
class SceneSpec:
    """Everything needed to render one triplet deterministically."""

    layout: str  # "two-plane" or "heightfield"
    depth_range: tuple[float, float]
    texture_seed: int
    camera_path: list[tuple[np.ndarray, np.ndarray]]  # per-frame (axis_angle, center)
    intrinsics: CameraIntrinsics
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.layout not in ("two-plane", "heightfield"):
            raise ValueError(f"unknown layout {self.layout!r}")
        d_near, d_far = self.depth_range
        if not (0 < d_near < d_far):
            raise ValueError(f"need 0 < d_near < d_far, got {self.depth_range}")
        if len(self.camera_path) != 3:
            raise ValueError(f"camera path needs 3 frames, got {len(self.camera_path)}")
        if self.layout == "two-plane":
            for aa, _ in self.camera_path:
                if np.any(np.asarray(aa) != 0.0):
                    raise ValueError("two-plane layout requires a rotation-free camera path")


@dataclass
class Triplet:
    """Three consecutive frames, the center frame's ground-truth depth
    (evaluation only, never trained on), and the shared intrinsics."""

    frames: list[np.ndarray]  # each (3,H,W) in [0,1]
    intrinsics: CameraIntrinsics
    gt_depth: np.ndarray | None = None
    # Camera-to-world poses per frame; carried in memory for geometry
    # validation, never serialized.
    gt_camera_path: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        shapes = {f.shape for f in self.frames}
        if len(self.frames) != 3 or len(shapes) != 1:
            raise ValueError(f"triplet needs 3 same-shape frames, got {sorted(shapes)}")
        if self.gt_depth is not None and np.any(self.gt_depth <= 0):
            raise ValueError("ground-truth depth must be positive")

    @property
    def target(self) -> np.ndarray:
        return self.frames[1]

    @property
    def sources(self) -> list[np.ndarray]:
        return [self.frames[0], self.frames[2]]

    def relative_pose(self, source_index: int) -> PoseSE3:
        """Ground-truth pose mapping center-frame points into a source frame."""
        if self.gt_camera_path is None:
            raise ValueError("triplet carries no ground-truth camera path")
        frame_j = 0 if source_index == 0 else 2
        aa_t, c_t = self.gt_camera_path[1]
        aa_j, c_j = self.gt_camera_path[frame_j]
        r_t = _rotation(aa_t)
        r_j = _rotation(aa_j)
        rel_r = r_j.T @ r_t
        rel_t = r_j.T @ (np.asarray(c_t) - np.asarray(c_j))
        return PoseSE3(_axis_angle(rel_r), rel_t)


def _rotation(axis_angle) -> np.ndarray:
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa)
    if theta < 1e-12:
        return np.eye(3)
    k = aa / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _axis_angle(rot: np.ndarray) -> np.ndarray:
    cos_t = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return axis / (2.0 * np.sin(theta)) * theta


class _SineTexture:
    """Band-limited RGB texture on a world plane: a per-plane base level
    plus a few sinusoids with seed-drawn frequencies and per-channel
    phases.  Distinct base levels give depth layers a luminance step, which
    both anchors the edge-aware smoothness at occlusion boundaries and acts
    as a monocular cue."""

    def __init__(self, rng: np.random.Generator, contrast: float = 0.42,
                 band: tuple[float, float] = TEXTURE_WAVELENGTHS, base: float = 0.5):
        wavelengths = rng.uniform(*band, TEXTURE_WAVES)
        angles = rng.uniform(0.0, np.pi, TEXTURE_WAVES)
        self.freqs = np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        ) * (2.0 * np.pi / wavelengths[:, None])
        self.phases = rng.uniform(0.0, 2.0 * np.pi, (3, TEXTURE_WAVES))
        amps = rng.uniform(0.5, 1.0, TEXTURE_WAVES)
        self.amps = amps / amps.sum() * contrast
        self.base = base

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = x[None, ...] * self.freqs[:, 0].reshape(-1, *([1] * x.ndim)) + \
              y[None, ...] * self.freqs[:, 1].reshape(-1, *([1] * x.ndim))
        out = np.empty((3, *x.shape))
        for c in range(3):
            waves = np.sin(arg + self.phases[c].reshape(-1, *([1] * x.ndim)))
            out[c] = self.base + (self.amps.reshape(-1, *([1] * x.ndim)) * waves).sum(axis=0)
        return np.clip(out, 0.0, 1.0)


def random_scene(
    seed: int,
    layout: str = "two-plane",
    width: int = 64,
    height: int = 64,
    intrinsics: CameraIntrinsics | None = None,
) -> SceneSpec:
    """Draw the scene parameters used by the toy datasets."""
    rng = np.random.default_rng(seed)
    if intrinsics is None:
        f = 0.75 * width
        intrinsics = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)
    d_near = rng.uniform(3.0, 5.0)
    d_far = rng.uniform(10.0, 14.0)
    # One dominant, sign-consistent motion direction across the corpus
    # (forward-driving style): random per-scene directions let a wrong-sign
    # pose hide behind the auto-mask and freeze training.
    baseline = rng.uniform(0.18, 0.28)
    jitter = rng.uniform(-0.025, 0.025, size=(3, 2))
    path = []
    for i, step in enumerate((-1.0, 0.0, 1.0)):
        center = np.array([step * baseline, jitter[i, 0], jitter[i, 1] * 0.5])
        path.append((np.zeros(3), center))
    return SceneSpec(
        layout=layout, depth_range=(d_near, d_far), texture_seed=int(seed),
        camera_path=path, intrinsics=intrinsics, width=width, height=height,
    )


def _ray_grid(spec: SceneSpec) -> np.ndarray:
    k = spec.intrinsics
    u, v = np.meshgrid(
        np.arange(spec.width, dtype=np.float64), np.arange(spec.height, dtype=np.float64)
    )
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=0)


def _two_plane_geometry(spec: SceneSpec, rng: np.random.Generator):
    d_near, d_far = spec.depth_range
    # Foreground rectangle extents in world units, sized to cover very
    # roughly a quarter to a third of the image from the center frame.
    half_w = d_near * spec.width / spec.intrinsics.fx * rng.uniform(0.24, 0.31)
    half_h = d_near * spec.height / spec.intrinsics.fy * rng.uniform(0.24, 0.31)
    cx_w = rng.uniform(-0.5, 0.5) * half_w
    cy_w = rng.uniform(-0.5, 0.5) * half_h
    return d_near, d_far, (cx_w, cy_w, half_w, half_h)


def _render_two_plane(spec: SceneSpec, cam, textures, geom):
    d_near, d_far, (rcx, rcy, half_w, half_h) = geom
    aa, center = cam
    dirs = _ray_grid(spec)  # camera frame, z component 1
    rot = _rotation(aa)
    dirs_w = np.tensordot(rot, dirs, axes=1)
    oz = center[2]

    t_near = (d_near - oz) / dirs_w[2]
    x_n = center[0] + t_near * dirs_w[0]
    y_n = center[1] + t_near * dirs_w[1]
    in_rect = (np.abs(x_n - rcx) <= half_w) & (np.abs(y_n - rcy) <= half_h) & (t_near > 0)

    t_far = (d_far - oz) / dirs_w[2]
    x_f = center[0] + t_far * dirs_w[0]
    y_f = center[1] + t_far * dirs_w[1]

    tex_near, tex_far = textures
    img = np.where(in_rect[None], tex_near(x_n, y_n), tex_far(x_f, y_f))
    # Camera z of the hit equals the ray parameter because the camera-frame
    # direction has unit z.
    depth = np.where(in_rect, t_near, t_far)
    return img, depth


def _render_heightfield(spec: SceneSpec, cam, textures, geom):
    base, amp, freqs, phases = geom
    aa, center = cam
    dirs = _ray_grid(spec)
    rot = _rotation(aa)
    dirs_w = np.tensordot(rot, dirs, axes=1)

    def height(x, y):
        arg = x[None] * freqs[:, 0, None, None] + y[None] * freqs[:, 1, None, None]
        return base + amp * np.mean(np.sin(arg + phases[:, None, None]), axis=0)

    t = (base - center[2]) / dirs_w[2]
    for _ in range(40):
        x = center[0] + t * dirs_w[0]
        y = center[1] + t * dirs_w[1]
        t = (height(x, y) - center[2]) / dirs_w[2]
    x = center[0] + t * dirs_w[0]
    y = center[1] + t * dirs_w[1]
    img = textures[0](x, y)
    return img, t.copy()


def generate_triplet(spec: SceneSpec) -> Triplet:
    """Render the three frames and the center frame's exact depth."""
    rng = np.random.default_rng(spec.texture_seed)
    if spec.layout == "two-plane":
        near_base = rng.uniform(0.34, 0.42)
        far_base = rng.uniform(0.58, 0.66)
        textures = (_SineTexture(rng, band=NEAR_TEXTURE_WAVELENGTHS, base=near_base),
                    _SineTexture(rng, base=far_base))
        geom = _two_plane_geometry(spec, rng)
        render = _render_two_plane
    else:
        d_near, d_far = spec.depth_range
        base = (d_near + d_far) / 2.0
        amp = (d_far - d_near) / 2.0 * 0.9
        n = 3
        wl = rng.uniform(4.0, 9.0, n)
        ang = rng.uniform(0, np.pi, n)
        freqs = np.stack([np.cos(ang), np.sin(ang)], axis=1) * (2 * np.pi / wl[:, None])
        phases = rng.uniform(0, 2 * np.pi, n)
        textures = (_SineTexture(rng),)
        geom = (base, amp, freqs, phases)
        render = _render_heightfield

    frames, depths = [], []
    for cam in spec.camera_path:
        img, depth = render(spec, cam, textures, geom)
        if np.any(depth <= 0):
            raise ValueError("degenerate camera path: geometry behind the camera")
        frames.append(np.ascontiguousarray(img))
        depths.append(depth)

    triplet = Triplet(
        frames=frames, intrinsics=spec.intrinsics, gt_depth=depths[1],
        gt_camera_path=[(np.asarray(a), np.asarray(c)) for a, c in spec.camera_path],
    )
    _check_overlap(triplet, spec)
    return triplet


def _check_overlap(triplet: Triplet, spec: SceneSpec) -> None:
    """Reject camera paths that push the shared view below MIN_OVERLAP."""
    k = spec.intrinsics
    h, w = spec.height, spec.width
    dirs = _ray_grid(spec)
    aa_t, c_t = triplet.gt_camera_path[1]
    points = np.asarray(c_t).reshape(3, 1, 1) + triplet.gt_depth[None] * np.tensordot(
        _rotation(aa_t), dirs, axes=1
    )
    for j in (0, 2):
        aa_j, c_j = triplet.gt_camera_path[j]
        local = np.tensordot(_rotation(aa_j).T, points - np.asarray(c_j).reshape(3, 1, 1), axes=1)
        u = k.fx * local[0] / local[2] + k.cx
        v = k.fy * local[1] / local[2] + k.cy
        frac = np.mean((u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & (local[2] > 0))
        if frac < MIN_OVERLAP:
            raise ValueError(
                f"degenerate camera path: only {frac:.0%} of pixels stay in view of frame {j}"
            )


# -- disk formats ---------------------------------------------------------------


def save_png(path, img: np.ndarray) -> None:
    """Write a (3,H,W) float image in [0,1] as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def save_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows bottom-up per the format."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects (H,W), got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            header = fh.readline().strip()
            if header != b"Pf":
                raise DatasetError(f"{path}: not a grayscale PFM (header {header!r})")
            dims = fh.readline().split()
            w, h = int(dims[0]), int(dims[1])
            scale = float(fh.readline())
            dtype = "<f4" if scale < 0 else ">f4"
            data = np.frombuffer(fh.read(w * h * 4), dtype=dtype).reshape(h, w)
    except (OSError, ValueError, IndexError) as exc:
        raise DatasetError(f"cannot read depth map {path}: {exc}") from exc
    return np.flipud(data).astype(np.float64)


def save_triplet(directory, triplet: Triplet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(FRAME_NAMES, triplet.frames):
        save_png(directory / name, frame)
    if triplet.gt_depth is not None:
        save_pfm(directory / DEPTH_NAME, triplet.gt_depth)
    k = triplet.intrinsics
    h, w = triplet.frames[0].shape[-2:]
    payload = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": w, "height": h}
    (directory / INTRINSICS_NAME).write_text(json.dumps(payload, indent=1))


def load_triplet_dir(directory) -> Triplet:
    directory = Path(directory)
    meta_path = directory / INTRINSICS_NAME
    if not meta_path.exists():
        raise DatasetError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        intr = CameraIntrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"ill-formed intrinsics file {meta_path}: {exc}") from exc
    frames = []
    for name in FRAME_NAMES:
        fp = directory / name
        if not fp.exists():
            raise DatasetError(f"missing frame {fp}")
        frames.append(load_png(fp))
    depth_path = directory / DEPTH_NAME
    gt = load_pfm(depth_path) if depth_path.exists() else None
    return Triplet(frames=frames, intrinsics=intr, gt_depth=gt, name=directory.name)


class TripletFolder:
    """Lazily loaded dataset: one subdirectory per triplet, lexicographic."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset directory {self.root} does not exist")
        self.dirs = sorted(p for p in self.root.iterdir() if p.is_dir())

    def __len__(self) -> int:
        return len(self.dirs)

    def __getitem__(self, index: int) -> Triplet:
        return load_triplet_dir(self.dirs[index])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_dataset(directory) -> TripletFolder:
    return TripletFolder(directory)


# -- augmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    brightness: float  # in [0.8, 1.2]
    contrast: float  # in [0.8, 1.2]
    saturation: float  # in [0.8, 1.2]
    hue: float  # in [-0.1, 0.1] turns

    @classmethod
    def draw(cls, seed: int) -> "AugmentParams":
        rng = np.random.default_rng(seed)
        return cls(
            flip=bool(rng.uniform() < 0.5),
            brightness=float(rng.uniform(0.8, 1.2)),
            contrast=float(rng.uniform(0.8, 1.2)),
            saturation=float(rng.uniform(0.8, 1.2)),
            hue=float(rng.uniform(-0.1, 0.1)),
        )


_RGB_TO_YIQ = np.array([
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
])


def _hue_rotation_matrix(turns: float) -> np.ndarray:
    theta = 2.0 * np.pi * turns
    rot = np.array([
        [1.0, 0.0, 0.0],
        [0.0, np.cos(theta), -np.sin(theta)],
        [0.0, np.sin(theta), np.cos(theta)],
    ])
    return np.linalg.inv(_RGB_TO_YIQ) @ rot @ _RGB_TO_YIQ


def _jitter_frame(img: np.ndarray, p: AugmentParams, gray_anchor: float) -> np.ndarray:
    out = img * p.brightness
    out = (out - gray_anchor) * p.contrast + gray_anchor
    luma = (out * np.array([0.299, 0.587, 0.114]).reshape(3, 1, 1)).sum(axis=0, keepdims=True)
    out = luma + (out - luma) * p.saturation
    out = np.tensordot(_hue_rotation_matrix(p.hue), out, axes=1)
    return np.clip(out, 0.0, 1.0)


def depth_discontinuity_mask(depth: np.ndarray, rel_threshold: float = 0.2,
                             radius: int = 2) -> np.ndarray:
    """True within ``radius`` pixels of a relative depth discontinuity.

    Bilinear warping is ill-posed across occlusion edges (the sampling
    support straddles two surfaces), so consistency checks exclude this
    band.  The threshold is a per-pixel relative jump large enough that
    steep but smooth surfaces stay unmasked; plane-versus-plane occlusion
    edges jump by far more.
    """
    d = np.asarray(depth, dtype=np.float64)
    jump = np.zeros(d.shape, dtype=bool)
    dx = np.abs(np.diff(d, axis=1)) > rel_threshold * np.minimum(d[:, 1:], d[:, :-1])
    dy = np.abs(np.diff(d, axis=0)) > rel_threshold * np.minimum(d[1:, :], d[:-1, :])
    jump[:, 1:] |= dx
    jump[:, :-1] |= dx
    jump[1:, :] |= dy
    jump[:-1, :] |= dy
    for _ in range(radius):
        grown = jump.copy()
        grown[1:, :] |= jump[:-1, :]
        grown[:-1, :] |= jump[1:, :]
        grown[:, 1:] |= jump[:, :-1]
        grown[:, :-1] |= jump[:, 1:]
        jump = grown
    return jump


def flip_horizontal(triplet: Triplet) -> Triplet:
    """Mirror all frames and the depth map, and reflect the principal point."""
    frames = [np.ascontiguousarray(f[:, :, ::-1]) for f in triplet.frames]
    gt = None if triplet.gt_depth is None else np.ascontiguousarray(triplet.gt_depth[:, ::-1])
    intr = triplet.intrinsics
    w = triplet.frames[0].shape[-1]
    intr = CameraIntrinsics(intr.fx, intr.fy, (w - 1) - intr.cx, intr.cy)
    return Triplet(frames=frames, intrinsics=intr, gt_depth=gt, name=triplet.name)


def augment_jitter_only(triplet: Triplet, seed: int) -> Triplet:
    """The color-jitter half of ``augment``, leaving geometry untouched.

    Batched training flips whole batches at once so intrinsics stay uniform;
    this applies the per-item part.
    """
    p = AugmentParams.draw(seed)
    anchor = float(triplet.frames[1].mean())
    frames = [_jitter_frame(f, p, anchor) for f in triplet.frames]
    return Triplet(frames=frames, intrinsics=triplet.intrinsics,
                   gt_depth=None if triplet.gt_depth is None else triplet.gt_depth.copy(),
                   name=triplet.name)


def augment(triplet: Triplet, seed: int) -> Triplet:
    """Photometric-consistency-preserving augmentation.

    The flip and one set of jitter parameters apply identically to all three
    frames (independent jitter would break the brightness-constancy
    assumption the photometric loss relies on); the ground-truth depth is
    flipped but never jittered, and a flip mirrors the principal point.
    """
    p = AugmentParams.draw(seed)
    # One anchor shared by the whole triplet keeps the contrast transform
    # identical across frames.
    anchor = float(triplet.frames[1].mean())
    frames = [_jitter_frame(f, p, anchor) for f in triplet.frames]
    out = Triplet(frames=frames, intrinsics=triplet.intrinsics,
                  gt_depth=None if triplet.gt_depth is None else triplet.gt_depth.copy(),
                  name=triplet.name)
    return flip_horizontal(out) if p.flip else out
