"""Minimal reverse-mode autodiff substrate: tensors, tape, AdamW, grad check."""

from karma.diffcore.gradcheck import GradCheckError, grad_check
from karma.diffcore.optim import AdamW, OptimizerState, adamw_step
from karma.diffcore.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    attention,
    concat,
    cross_entropy,
    div,
    exp,
    gather_rows,
    gelu,
    get_default_dtype,
    getitem,
    l2_normalize,
    layer_norm,
    layer_norm_affine,
    linear,
    log,
    log_softmax,
    matmul,
    mse,
    mul,
    neg,
    power,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    softplus,
    tanh,
    tmean,
    transpose,
    tsum,
    use_dtype,
)

__all__ = [
    "AdamW", "GradCheckError", "NonFiniteError", "OptimizerState", "ShapeError",
    "Tape", "TapeError", "Tensor", "adamw_step", "add", "attention", "concat",
    "cross_entropy", "div", "exp", "gather_rows", "gelu", "get_default_dtype",
    "getitem", "grad_check", "l2_normalize", "layer_norm", "log", "log_softmax",
    "matmul", "mse", "mul", "neg", "power", "reshape", "set_default_dtype",
    "sigmoid", "softmax", "softplus", "tanh", "tmean", "transpose", "tsum",
    "use_dtype",
]
