"""Desk-scale depth and pose networks.

The depth net is a 4-stage conv encoder (16/32/64/128 channels, each stage
halving resolution) and a 5-block decoder of upsample+conv with skip
connections; an adaptive
disparity head sits on each of the 4 highest-resolution blocks, so one
forward pass yields disparities at full, half, quarter and eighth
resolution.  The pose net maps a concatenated frame pair to a 6-vector
(axis-angle, translation) scaled by 0.01 to keep early motions small.

Checkpoints are a versioned container: a JSON manifest (bin count, tau,
toggles, architecture hash, tensor directory, payload checksum) followed by
the named parameters as raw little-endian float32.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .ddv import AddvHead, addv_forward, make_head
from .diffcore import Tensor
from .discretize import BinPartition, DisparityRange, sid_bins, uniform_bins
from .errors import CheckpointError, ShapeError
from .geometry import PoseSE3

ENCODER_CHANNELS = (16, 32, 64, 128)
DECODER_CHANNELS = (64, 64, 32, 16, 16)  # lowest block first
POSE_CHANNELS = (16, 32, 64)
POSE_OUTPUT_SCALE = 0.01
CHECKPOINT_MAGIC = b"DDVC"
CHECKPOINT_VERSION = 1


def _conv_init(rng, cout, cin, k, zero_init=False):
    if zero_init:
        w = np.zeros((cout, cin, k, k))
    else:
        bound = np.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, (cout, cin, k, k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)


def fixed_partition(strategy: str, n_bins: int) -> BinPartition | None:
    """The baseline partition for a strategy name, or None for adaptive."""
    if strategy == "addv":
        return None
    if strategy == "ud":
        return uniform_bins(n_bins, DisparityRange(0.01, 1.0))
    if strategy == "sid":
        return sid_bins(n_bins, DisparityRange(0.01, 1.0))
    raise ValueError(f"unknown bin strategy {strategy!r}")


class DepthNet:
    """Encoder-decoder disparity network with per-scale adaptive heads."""

    def __init__(
        self,
        n_bins: int = 32,
        tau: float = 0.5,
        strategy: str = "addv",
        seed: int = 0,
        zero_init_heads: bool = False,
    ):
        self.n_bins = n_bins
        self.tau = tau
        self.strategy = strategy
        rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

        cin = 3
        self.enc = []
        for i, cout in enumerate(ENCODER_CHANNELS):
            w, b = _conv_init(rng, cout, cin, 3)
            self._register(f"enc{i}", w, b)
            self.enc.append((w, b))
            cin = cout

        # Decoder inputs: block 0 sees the bottleneck; later blocks see the
        # upsampled previous block concatenated with the matching skip.
        skip = (None, ENCODER_CHANNELS[2], ENCODER_CHANNELS[1], ENCODER_CHANNELS[0], None)
        self.dec = []
        cin = ENCODER_CHANNELS[-1]
        for i, cout in enumerate(DECODER_CHANNELS):
            total_in = cin + (skip[i] or 0)
            w, b = _conv_init(rng, cout, total_in, 3)
            self._register(f"dec{i}", w, b)
            self.dec.append((w, b))
            cin = cout

        fixed = fixed_partition(strategy, n_bins)
        self.heads: list[AddvHead] = []
        # Head 0 is the full-resolution block (decoder block 4); the lowest
        # resolution block (decoder block 0) carries no head.
        for i, ch in enumerate(reversed(DECODER_CHANNELS[1:])):
            head = make_head(
                ch, n_bins, tau=tau,
                rng=np.random.default_rng(rng.integers(2 ** 63)),
                zero_init=zero_init_heads, fixed_bins=fixed,
            )
            for pname, p in head.parameters().items():
                self._params[f"head{i}.{pname}"] = p
            self.heads.append(head)

    def _register(self, name, w, b):
        self._params[f"{name}.w"] = w
        self._params[f"{name}.b"] = b

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def forward(self, image: Tensor):
        """Disparity, probability volume, and bins at 4 scales.

        Index 0 is full resolution, index s is 1/2**s of it.  Requires both
        image extents divisible by 16.
        """
        x = dc.as_tensor(image)
        squeeze = x.ndim == 3
        if squeeze:
            x = dc.reshape(x, (1, *x.shape))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"depth net expects (B,3,H,W), got {x.shape}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"resolution {h}x{w} not divisible by 16")

        feats = []
        for cw, cb in self.enc:
            # Odd kernels with symmetric zero padding cannot produce an
            # integral stride-2 extent on even inputs, so each stage is a
            # stride-1 conv followed by 2x2 mean pooling.
            x = dc.avg_pool2(dc.elu(dc.conv2d(x, cw, cb, stride=1, padding=1)))
            feats.append(x)

        outs = []
        x = feats[-1]
        skips = [None, feats[2], feats[1], feats[0], None]
        for i, (cw, cb) in enumerate(self.dec):
            if i > 0:
                x = dc.upsample_bilinear(x, 2)
                if skips[i] is not None:
                    x = dc.concat([x, skips[i]], axis=1)
            x = dc.elu(dc.conv2d(x, cw, cb, stride=1, padding=1))
            if i > 0:
                head = self.heads[len(self.dec) - 1 - i]
                outs.append(addv_forward(x, head))
        outs.reverse()  # index 0 = full resolution
        if squeeze:
            squeezed = []
            for disp, pv, bins in outs:
                disp = dc.reshape(disp, disp.shape[1:])
                pv.probs = dc.reshape(pv.probs, pv.probs.shape[1:])
                bins.values = dc.reshape(bins.values, bins.values.shape[1:])
                squeezed.append((disp, pv, bins))
            outs = squeezed
        return outs


def depth_forward(image: Tensor, net: DepthNet):
    return net.forward(image)


class PoseNet:
    """Relative 6-DoF pose from a concatenated frame pair."""

    def __init__(self, seed: int = 0, zero_init_final: bool = False):
        rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        cin = 6
        self.convs = []
        for i, cout in enumerate(POSE_CHANNELS):
            w, b = _conv_init(rng, cout, cin, 3)
            self._params[f"pconv{i}.w"] = w
            self._params[f"pconv{i}.b"] = b
            self.convs.append((w, b))
            cin = cout
        w, b = _conv_init(rng, 6, cin, 1, zero_init=zero_init_final)
        self._params["pfinal.w"] = w
        self._params["pfinal.b"] = b
        self.final = (w, b)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def forward(self, frame_a: Tensor, frame_b: Tensor) -> PoseSE3:
        a, b = dc.as_tensor(frame_a), dc.as_tensor(frame_b)
        if a.shape != b.shape:
            raise ShapeError(f"pose net frames differ: {a.shape} vs {b.shape}")
        squeeze = a.ndim == 3
        if squeeze:
            a = dc.reshape(a, (1, *a.shape))
            b = dc.reshape(b, (1, *b.shape))
        x = dc.concat([a, b], axis=1)
        for cw, cb in self.convs:
            x = dc.avg_pool2(dc.elu(dc.conv2d(x, cw, cb, stride=1, padding=1)))
        x = dc.conv2d(x, *self.final, stride=1, padding=0)
        vec = dc.reshape(dc.global_avg_pool(x), (x.shape[0], 6)) * POSE_OUTPUT_SCALE
        axis_angle, translation = vec[:, :3], vec[:, 3:]
        if squeeze:
            axis_angle = dc.reshape(axis_angle, (3,))
            translation = dc.reshape(translation, (3,))
        return PoseSE3(axis_angle, translation)


def pose_forward(frame_a: Tensor, frame_b: Tensor, net: PoseNet) -> PoseSE3:
    return net.forward(frame_a, frame_b)


# -- checkpoint container -------------------------------------------------------


def architecture_hash(meta: dict) -> str:
    arch = {
        "encoder": ENCODER_CHANNELS,
        "decoder": DECODER_CHANNELS,
        "pose": POSE_CHANNELS,
        "n_bins": meta["n_bins"],
        "strategy": meta["strategy"],
    }
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, depth_net: DepthNet, pose_net: PoseNet, extra: dict | None = None):
    """Write both networks as named little-endian float32 tensors."""
    named: dict[str, np.ndarray] = {}
    for k, v in depth_net.parameters().items():
        named[f"depth.{k}"] = v.data
    for k, v in pose_net.parameters().items():
        named[f"pose.{k}"] = v.data
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "n_bins": depth_net.n_bins,
        "tau": depth_net.tau,
        "strategy": depth_net.strategy,
        "toggles": (extra or {}).get("toggles", {"uniformizing": True, "sharpening": True}),
    }
    meta["arch_hash"] = architecture_hash(meta)
    if extra:
        meta.update({k: v for k, v in extra.items() if k != "toggles"})
    payload = b"".join(
        named[k].astype("<f4").tobytes() for k in sorted(named)
    )
    meta["tensors"] = [{"name": k, "shape": list(named[k].shape)} for k in sorted(named)]
    meta["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[DepthNet, PoseNet, dict]:
    """Rebuild both networks from a checkpoint, verifying the payload hash."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    blob = raw[16 : 16 + blob_len]
    try:
        meta = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    payload = raw[16 + blob_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != meta.get("payload_sha256"):
        raise CheckpointError(f"{path}: bad checkpoint hash (payload digest mismatch)")
    expected_hash = architecture_hash(meta)
    if meta.get("arch_hash") != expected_hash:
        raise CheckpointError(f"{path}: architecture hash mismatch")

    depth_net = DepthNet(n_bins=meta["n_bins"], tau=meta["tau"], strategy=meta["strategy"])
    pose_net = PoseNet()
    named = {}
    offset = 0
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        named[entry["name"]] = arr.reshape(shape).astype(np.float64)
    for prefix, net in (("depth.", depth_net), ("pose.", pose_net)):
        for k, p in net.parameters().items():
            key = prefix + k
            if key not in named:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if named[key].shape != p.shape:
                raise CheckpointError(
                    f"{path}: tensor {key} has shape {named[key].shape}, expected {p.shape}"
                )
            p.data = named[key]
    return depth_net, pose_net, meta
