"""Dense-array substrate: autodiff tensors, conv2d, bilinear sampling, gradcheck."""

from .core import (
    Tensor,
    absolute,
    as_tensor,
    clip,
    concat,
    cos,
    div,
    exp,
    log,
    matmul,
    maximum,
    minimum,
    mul,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    sqrt,
    stack,
    sub,
    take,
    tanh,
    tmax,
    tmean,
    transpose,
    tsum,
    where,
)
from .gradcheck import GradReport, finite_diff_check
from .ops import avg_pool2, bilinear_sample, conv2d, upsample2

__all__ = [
    "Tensor", "as_tensor", "parameter", "absolute", "clip", "concat", "cos",
    "div", "exp", "log", "matmul", "maximum", "minimum", "mul", "power",
    "relu", "reshape", "sigmoid", "sin", "softmax", "sqrt", "stack", "sub",
    "take", "tanh", "tmax", "tmean", "transpose", "tsum", "where",
    "GradReport", "finite_diff_check",
    "avg_pool2", "bilinear_sample", "conv2d", "upsample2",
]
