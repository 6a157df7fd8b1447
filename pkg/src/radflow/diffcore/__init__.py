"""Minimal reverse-mode autodiff, Adam, gradient checking, checkpoints."""

from .adam import Adam, exponential_lr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    DiffcoreError,
    affine,
    residual_tanh_step,
    GraphStateError,
    InvertibilityError,
    NonFiniteError,
    ParameterSet,
    Tensor,
    ValueGraph,
    add,
    concat,
    cumsum,
    div,
    exp,
    log,
    logdet,
    logsumexp,
    matmul,
    mul,
    neg,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    swap_last2,
    take,
    tanh,
    tmean,
    transpose,
    tsum,
    value_of,
)

__all__ = [
    "Adam",
    "affine",
    "residual_tanh_step",
    "CheckpointError",
    "DiffcoreError",
    "GradCheckReport",
    "GraphStateError",
    "InvertibilityError",
    "NonFiniteError",
    "ParameterSet",
    "Tensor",
    "ValueGraph",
    "add",
    "concat",
    "cumsum",
    "div",
    "exp",
    "exponential_lr",
    "grad_check",
    "load_checkpoint",
    "log",
    "logdet",
    "logsumexp",
    "matmul",
    "mul",
    "neg",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softplus",
    "sqrt",
    "square",
    "stack",
    "sub",
    "swap_last2",
    "take",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
    "value_of",
]
