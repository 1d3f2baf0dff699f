"""Differentiable operations on tensors.

All functions accept plain scalars/arrays wherever a tensor is expected and
wrap them as constants.  Image-like tensors use the last three axes as
(channel, height, width); any number of leading batch axes is allowed where
noted.  The subgradient of |x| at 0 is fixed to 0.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, unbroadcast

_CHANNEL_AXIS = -3  # channel position for (.., N, H, W) layouts


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise suite --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains exact zeros")
    # True division, not multiplication by the reciprocal: x/x must be 1.0
    # exactly (the max normalization of adaptive bins relies on it).
    out = a.data / b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape),
                   unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def absval(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # 0 at 0: the fixed subgradient
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)  # overflow surfaces as NonFiniteError
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)  # non-positive inputs surface as NonFiniteError
    return Tensor.from_op(out, (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def minimum(a, b) -> Tensor:
    """Pointwise min; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    return Tensor.from_op(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(g * take_a, a.shape), unbroadcast(g * ~take_a, b.shape)),
        "minimum",
    )


def maximum(a, b) -> Tensor:
    """Pointwise max; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    return Tensor.from_op(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(g * take_a, a.shape), unbroadcast(g * ~take_a, b.shape)),
        "maximum",
    )


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient passes inside the (inclusive) range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return Tensor.from_op(out, (a,), lambda g: (g * inside,), "clamp")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor.from_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(g * cond, a.shape), unbroadcast(g * ~cond, b.shape)),
        "where",
    )


def sigmoid(a) -> Tensor:
    """1/(1+exp(-x)) pointwise, outputs in (0,1)."""
    a = as_tensor(a)
    # Evaluate on the negative half-line only so exp never overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(a) -> Tensor:
    """Exponential linear unit, alpha=1."""
    a = as_tensor(a)
    neg_part = np.exp(np.minimum(a.data, 0.0)) - 1.0
    pos = a.data > 0
    out = np.where(pos, a.data, neg_part)
    return Tensor.from_op(out, (a,), lambda g: (g * np.where(pos, 1.0, neg_part + 1.0),), "elu")


# -- reductions and reshaping -------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter back to the source."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    # np.array, not ascontiguousarray: the latter promotes 0-d results to
    # shape (1,), which breaks scalar indexing and its gradient scatter.
    return Tensor.from_op(np.array(a.data[index]), (a,), backward, "getitem")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward, "stack")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(out, tensors, backward, "concat")


# -- image-structured operations ----------------------------------------------

def _col_view(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided (B, C, Ho, Wo, k, k) window view of a padded input."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weights, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,k,k) kernels.

    Requires odd k and an integral output extent (H+2p-k)/stride + 1.
    Padding is zero-padding.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (B,Cin,H,W), got {x.shape}")
    cout, cin, k, k2 = weights.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {weights.shape}")
    b_, c_, h, w = x.shape
    if c_ != cin:
        raise ShapeError(f"conv2d: input channels {c_} != kernel channels {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ShapeError(
            f"conv2d: non-integral output extent for input {h}x{w}, "
            f"k={k}, stride={stride}, padding={padding}"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _col_view(xp, k, stride)  # B,Cin,Ho,Wo,k,k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b_ * ho * wo, cin * k * k
    )
    w2 = weights.data.reshape(cout, cin * k * k)
    out = (cols @ w2.T + bias.data).reshape(b_, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b_ * ho * wo, cout)
        grad_w = (g2.T @ cols).reshape(weights.shape)
        grad_b = g2.sum(axis=0)
        if stride == 1:
            # Stride-1 input gradient is itself a correlation: pad the output
            # cotangent by k-1-p and correlate with the flipped kernel.
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - padding,) * 2, (k - 1 - padding,) * 2))
            gwin = _col_view(gp, k, 1)
            gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
                b_ * h * w, cout * k * k
            )
            w_rot = weights.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(
                cin, cout * k * k
            )
            grad_x = (gcols @ w_rot.T).reshape(b_, h, w, cin).transpose(0, 3, 1, 2)
            return np.ascontiguousarray(grad_x), grad_w, grad_b
        grad_cols = (g2 @ w2).reshape(b_, ho, wo, cin, k, k)
        gxp = np.zeros((b_, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                    grad_cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                )
        grad_x = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return grad_x, grad_w, grad_b

    return Tensor.from_op(np.ascontiguousarray(out), (x, weights, bias), backward, "conv2d")


def softmax_tau(y, tau: float = 1.0) -> Tensor:
    """Temperature softmax over the channel axis of a (..,N,H,W) tensor.

    tau in (0,1]; tau=1 is the plain softmax.  Computed with max-subtraction
    so small temperatures cannot overflow.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"softmax_tau: tau must be in (0,1], got {tau}")
    y = as_tensor(y)
    if y.ndim < 3:
        raise ShapeError(f"softmax_tau: need at least (N,H,W), got {y.shape}")
    z = y.data / tau
    z = z - z.max(axis=_CHANNEL_AXIS, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=_CHANNEL_AXIS, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=_CHANNEL_AXIS, keepdims=True)
        return (probs * (g - inner) / tau,)

    return Tensor.from_op(probs, (y,), backward, "softmax_tau")


def cumsum_channels(x) -> Tensor:
    """Prefix sum along the channel axis; gradient is the suffix sum."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"cumsum_channels: need at least (N,H,W), got {x.shape}")
    out = np.cumsum(x.data, axis=_CHANNEL_AXIS)

    def backward(g):
        rev = np.flip(g, axis=_CHANNEL_AXIS)
        return (np.flip(np.cumsum(rev, axis=_CHANNEL_AXIS), axis=_CHANNEL_AXIS),)

    return Tensor.from_op(out, (x,), backward, "cumsum_channels")


def avg_pool2(x) -> Tensor:
    """2x2 non-overlapping mean pooling; extents must be even."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"avg_pool2: need at least (H,W), got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: extents must be even, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        gb = np.broadcast_to(
            g[..., :, None, :, None] / 4.0, (*lead, h // 2, 2, w // 2, 2)
        )
        return (gb.reshape(x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "avg_pool2")


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes, kept as size-1 dims."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool: need at least (N,H,W), got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "global_avg_pool")


def argmax_channels(x) -> np.ndarray:
    """Channel index of the per-pixel maximum; ties take the lowest index.

    Not differentiable: returns a plain integer array.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(x, axis=_CHANNEL_AXIS)


def _bilinear_weights(u: np.ndarray, v: np.ndarray, h: int, w: int):
    """Corner indices and weights for clamped bilinear sampling."""
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.clip(np.floor(uc), 0, w - 2).astype(np.int64) if w > 1 else np.zeros_like(uc, dtype=np.int64)
    y0 = np.clip(np.floor(vc), 0, h - 2).astype(np.int64) if h > 1 else np.zeros_like(vc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0
    return uc, vc, x0, y0, x1, y1, fx, fy


def bilinear_sample(img, grid) -> tuple[Tensor, np.ndarray]:
    """Sample (B,C,H,W) at continuous pixel coordinates (B,H',W',2).

    The grid's last axis holds (u, v) in source-image pixel units.
    Coordinates outside [0,W-1]x[0,H-1] are clamped to the border and marked
    False in the returned validity mask.  Gradients flow to both the image
    and the grid (zero grid gradient where clamped).
    """
    img, grid = as_tensor(img), as_tensor(grid)
    if img.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: need img (B,C,H,W) and grid (B,H,W,2), got {img.shape}, {grid.shape}")
    b, c, h, w = img.shape
    if grid.shape[0] != b:
        raise ShapeError(f"bilinear_sample: batch mismatch {img.shape} vs {grid.shape}")
    gh, gw = grid.shape[1:3]

    u = grid.data[..., 0]
    v = grid.data[..., 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc, vc, x0, y0, x1, y1, fx, fy = _bilinear_weights(u, v, h, w)

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    imgf = img.data.reshape(b, c, h * w)
    i00 = (y0 * w + x0).reshape(b, 1, gh * gw)
    i01 = (y0 * w + x1).reshape(b, 1, gh * gw)
    i10 = (y1 * w + x0).reshape(b, 1, gh * gw)
    i11 = (y1 * w + x1).reshape(b, 1, gh * gw)

    g00 = np.take_along_axis(imgf, np.broadcast_to(i00, (b, c, gh * gw)), axis=2)
    g01 = np.take_along_axis(imgf, np.broadcast_to(i01, (b, c, gh * gw)), axis=2)
    g10 = np.take_along_axis(imgf, np.broadcast_to(i10, (b, c, gh * gw)), axis=2)
    g11 = np.take_along_axis(imgf, np.broadcast_to(i11, (b, c, gh * gw)), axis=2)

    wf = lambda a: a.reshape(b, 1, gh * gw)
    out = (wf(w00) * g00 + wf(w01) * g01 + wf(w10) * g10 + wf(w11) * g11).reshape(b, c, gh, gw)

    # Grid gradient vanishes where the clamp is active.
    du_open = (u > 0.0) & (u < w - 1.0)
    dv_open = (v > 0.0) & (v < h - 1.0)

    def backward(g):
        gf = g.reshape(b, c, gh * gw)
        grad_img = None
        if img.requires_grad:
            offs = (np.arange(b, dtype=np.int64) * (h * w))[:, None, None]
            flat_sz = b * h * w
            acc = np.zeros(flat_sz, dtype=g.dtype)
            per_c = np.zeros((c, flat_sz), dtype=g.dtype)
            for idx, wgt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                gidx = (idx.reshape(b, 1, gh * gw) + offs).reshape(b, gh * gw)
                vals = gf * wgt.reshape(b, 1, gh * gw)
                for ci in range(c):
                    per_c[ci] += np.bincount(
                        gidx.ravel(), weights=vals[:, ci, :].ravel(), minlength=flat_sz
                    )
            grad_img = per_c.reshape(c, b, h, w).transpose(1, 0, 2, 3)
            del acc
        grad_grid = None
        if grid.requires_grad:
            dfx = ((1 - fy).reshape(b, 1, gh * gw) * (g01 - g00)
                   + fy.reshape(b, 1, gh * gw) * (g11 - g10))
            dfy = ((1 - fx).reshape(b, 1, gh * gw) * (g10 - g00)
                   + fx.reshape(b, 1, gh * gw) * (g11 - g01))
            du = (gf * dfx).sum(axis=1).reshape(b, gh, gw) * du_open
            dv = (gf * dfy).sum(axis=1).reshape(b, gh, gw) * dv_open
            grad_grid = np.stack([du, dv], axis=-1)
        return grad_img, grad_grid

    return Tensor.from_op(out, (img, grid), backward, "bilinear_sample"), valid


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, align-corners-false.

    Source coordinate of output pixel i is (i+0.5)/factor - 0.5, clamped to
    the image; constant inputs map to constants and factor 1 is the identity.
    """
    x = as_tensor(x)
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample_bilinear: factor must be a positive integer, got {factor}")
    if factor == 1:
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    if x.ndim < 2:
        raise ShapeError(f"upsample_bilinear: need at least (H,W), got {x.shape}")
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    ho, wo = h * factor, w * factor

    us = (np.arange(wo) + 0.5) / factor - 0.5
    vs = (np.arange(ho) + 0.5) / factor - 0.5
    u = np.broadcast_to(us, (ho, wo))
    v = np.broadcast_to(vs[:, None], (ho, wo))
    _, _, x0, y0, x1, y1, fx, fy = _bilinear_weights(u, v, h, w)
    w00, w01 = (1 - fy) * (1 - fx), (1 - fy) * fx
    w10, w11 = fy * (1 - fx), fy * fx
    i00, i01 = y0 * w + x0, y0 * w + x1
    i10, i11 = y1 * w + x0, y1 * w + x1

    flat = x.data.reshape(-1, h * w)
    out = (flat[:, i00.ravel()] * w00.ravel() + flat[:, i01.ravel()] * w01.ravel()
           + flat[:, i10.ravel()] * w10.ravel() + flat[:, i11.ravel()] * w11.ravel())
    out = out.reshape(*lead, ho, wo)

    def backward(g):
        gflat = g.reshape(-1, ho * wo)
        n = gflat.shape[0]
        grad = np.zeros((n, h * w), dtype=g.dtype)
        for idx, wgt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
            iv, wv = idx.ravel(), wgt.ravel()
            for row in range(n):
                grad[row] += np.bincount(iv, weights=gflat[row] * wv, minlength=h * w)
        return (grad.reshape(x.shape),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward, "upsample_bilinear")


def box_filter3(x) -> Tensor:
    """3x3 mean filter with edge replication, same output size.

    Used by the structural-similarity windows; edge padding keeps constant
    images constant all the way to the border.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"box_filter3: need at least (H,W), got {x.shape}")
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x.data, pad, mode="edge")
    out = np.zeros_like(x.data)
    for di in range(3):
        for dj in range(3):
            out += xp[..., di : di + h, dj : dj + w]
    out /= 9.0

    def backward(g):
        gp = np.zeros_like(xp)
        g9 = g / 9.0
        for di in range(3):
            for dj in range(3):
                gp[..., di : di + h, dj : dj + w] += g9
        grad = gp[..., 1 : h + 1, 1 : w + 1].copy()
        # Fold the replicated-edge contributions back onto the border.
        grad[..., 0, :] += gp[..., 0, 1 : w + 1]
        grad[..., -1, :] += gp[..., h + 1, 1 : w + 1]
        grad[..., :, 0] += gp[..., 1 : h + 1, 0]
        grad[..., :, -1] += gp[..., 1 : h + 1, w + 1]
        grad[..., 0, 0] += gp[..., 0, 0]
        grad[..., 0, -1] += gp[..., 0, w + 1]
        grad[..., -1, 0] += gp[..., h + 1, 0]
        grad[..., -1, -1] += gp[..., h + 1, w + 1]
        return (grad,)

    return Tensor.from_op(out, (x,), backward, "box_filter3")
