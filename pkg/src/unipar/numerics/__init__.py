"""Tensor library: autodiff ops, counter-based RNG, AdamW, gradient checks."""
from unipar.numerics.optim import AdamW, Moments, adamw_step
from unipar.numerics.rng import Rng, RngState
from unipar.numerics.tensor import (
    Tape, Tensor, active_tape, add, backward, broadcast_to, batch_norm, clip, concat, exp, gelu,
    get_default_dtype, layer_norm, linear, log, matmul, mean, mul, neg, no_grad,
    parameter, precision, reshape, scale, set_default_dtype, shift, sigmoid,
    slice_axis, softmax, softmax_rows, sub, tanh, transpose, tsum,
)

__all__ = [
    "AdamW", "Moments", "Rng", "RngState", "Tape", "Tensor", "active_tape", "adamw_step",
    "add", "backward", "broadcast_to", "batch_norm", "clip", "concat", "exp", "gelu", "get_default_dtype",
    "layer_norm", "linear", "log", "matmul", "mean", "mul", "neg", "no_grad", "parameter",
    "precision", "reshape", "scale", "set_default_dtype", "shift", "sigmoid", "slice_axis",
    "softmax", "softmax_rows", "sub", "tanh", "transpose", "tsum",
]
