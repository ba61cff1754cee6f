"""Minimal float64 tensor library with reverse-mode autodiff."""

from .core import GradTape, NonFiniteError, Tensor, TensorError, active_tape, as_tensor, backward
from .ops import (
    abs_, add, avg_pool, bilinear_sample, clip, concat, conv2d, div, exp, flatten, getitem,
    layer_norm, log, matmul, mean, mul, neg, power, relu, reshape, resize_bilinear, sigmoid,
    softmax, softplus, softmax_rows, sqrt, stack, sub, sum_, tanh, transpose, upsample_nearest,
)
from .serialize import dump_tensor, load_tensor

__all__ = [
    "GradTape", "NonFiniteError", "Tensor", "TensorError", "active_tape", "as_tensor", "backward",
    "abs_", "add", "avg_pool", "bilinear_sample", "clip", "concat", "conv2d", "div", "exp",
    "flatten", "getitem", "layer_norm", "log", "matmul", "mean", "mul", "neg", "power", "relu",
    "reshape", "resize_bilinear", "sigmoid", "softmax", "softplus", "softmax_rows", "sqrt", "stack", "sub",
    "sum_", "tanh", "transpose", "upsample_nearest", "dump_tensor", "load_tensor",
]
