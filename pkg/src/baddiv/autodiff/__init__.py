"""Reverse-mode autodiff engine: tensors, tape, conv kernels, Adam, sqrtm."""

from .tensor import (
    DTYPE,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    batch_norm,
    batch_moments,
    clip,
    div,
    elu,
    exp,
    finite_checks,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    outer,
    record,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tmean,
    trace,
    transpose,
    tsum,
)
from .conv import conv2d, conv_transpose2d
from .adam import Adam, AdamState, adam_step
from .sqrtm import SqrtmError, newton_schulz_sqrt

__all__ = [
    "DTYPE",
    "NonFiniteError",
    "ShapeError",
    "SqrtmError",
    "Tape",
    "Tensor",
    "Adam",
    "AdamState",
    "adam_step",
    "add",
    "batch_norm",
    "batch_moments",
    "clip",
    "conv2d",
    "conv_transpose2d",
    "div",
    "elu",
    "exp",
    "finite_checks",
    "leaky_relu",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "neg",
    "newton_schulz_sqrt",
    "no_grad",
    "outer",
    "record",
    "reshape",
    "sigmoid",
    "softmax",
    "sqrt",
    "sub",
    "tmean",
    "trace",
    "transpose",
    "tsum",
]
