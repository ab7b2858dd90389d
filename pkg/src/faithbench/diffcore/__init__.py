"""Reverse-mode automatic differentiation over float64 numpy arrays."""

from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    backprop,
    broadcast_to,
    concat,
    div,
    embedding,
    exp,
    finite_checks,
    gelu,
    getitem,
    grad,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    set_grad_enabled,
    softmax,
    sqrt,
    stack,
    sub,
    sum_to,
    swapaxes,
    tabs,
    tanh,
    transpose,
    tsum,
)
from .gradcheck import PenaltyGrad, finite_diff_gradient, grad_norm_penalty_grad

__all__ = [
    "NonFiniteError", "Tensor", "add", "as_tensor", "backprop", "broadcast_to", "concat",
    "div", "embedding", "exp", "finite_checks", "gelu", "getitem", "grad", "is_grad_enabled",
    "layer_norm", "log", "log_softmax", "matmul", "mean", "mul", "neg", "no_grad", "power",
    "relu", "reshape", "set_grad_enabled", "softmax", "sqrt", "stack", "sub", "sum_to",
    "swapaxes", "tabs", "tanh", "transpose", "tsum", "PenaltyGrad", "finite_diff_gradient",
    "grad_norm_penalty_grad",
]
