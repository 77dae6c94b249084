"""Flat-tape reverse-mode autodiff over float64 numpy arrays, plus Adam."""

from .tensor import (
    NumericError,
    Tape,
    Tensor,
    as_tensor,
    concat,
    detach,
    exp,
    finite_checks,
    gelu,
    getitem,
    grad,
    inject_backward_fault,
    l2_normalize,
    log,
    logsumexp,
    matmul,
    max_,
    mean,
    mse,
    no_grad,
    reshape,
    softmax,
    sqrt,
    sum_,
    swap_last,
    tanh,
    transpose,
    uniform_init,
    zeros_init,
)
from .gradcheck import check_gradients, finite_difference_gradient, max_rel_err
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "NumericError",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_gradients",
    "concat",
    "detach",
    "exp",
    "finite_checks",
    "finite_difference_gradient",
    "gelu",
    "getitem",
    "grad",
    "inject_backward_fault",
    "l2_normalize",
    "log",
    "logsumexp",
    "matmul",
    "max_",
    "max_rel_err",
    "mean",
    "mse",
    "no_grad",
    "reshape",
    "softmax",
    "sqrt",
    "sum_",
    "swap_last",
    "tanh",
    "transpose",
    "uniform_init",
    "zeros_init",
]
