"""Minimal reverse-mode autodiff core: tensors, ops, and the gradient oracle."""

from .gradcheck import GradCheckReport, gradcheck
from .ops import (
    absval,
    add,
    argmax_channels,
    avg_pool2,
    bilinear_sample,
    box_filter3,
    clamp,
    concat,
    conv2d,
    cos,
    cumsum_channels,
    div,
    elu,
    exp,
    getitem,
    global_avg_pool,
    log,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    reshape,
    sigmoid,
    sin,
    softmax_tau,
    sqrt,
    stack,
    sub,
    sum_,
    upsample_bilinear,
    where,
)
from .tensor import Tensor, as_tensor, clear_gradient_corruption, corrupt_gradient

__all__ = [
    "Tensor", "as_tensor", "gradcheck", "GradCheckReport",
    "corrupt_gradient", "clear_gradient_corruption",
    "add", "sub", "mul", "div", "neg", "absval", "exp", "log", "sin", "cos",
    "sqrt", "minimum", "maximum", "clamp", "where", "sigmoid", "elu",
    "sum_", "mean", "reshape", "getitem", "stack", "concat",
    "conv2d", "softmax_tau", "cumsum_channels", "global_avg_pool", "avg_pool2",
    "argmax_channels", "bilinear_sample", "upsample_bilinear", "box_filter3",
]
