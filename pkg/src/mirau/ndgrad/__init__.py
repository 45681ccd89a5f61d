"""Dense arrays, reverse-mode differentiation and NN operators."""

from . import functional
from .functional import (
    attention,
    conv2d,
    conv_transpose2d,
    dropout,
    gelu,
    group_norm,
    layer_norm,
    linear,
    multi_head_attention,
    sigmoid,
    softmax,
)
from .gradcheck import grad_check
from .nn import Module, Parameter
from .tensor import (
    DimensionError,
    GradTape,
    NonFiniteError,
    Tensor,
    concatenate,
    current_tape,
    default_dtype,
    matmul,
    no_grad,
    pad,
    precision,
    roll,
    stack,
    tensor,
    where,
)

__all__ = [
    "DimensionError", "GradTape", "Module", "NonFiniteError", "Parameter", "Tensor",
    "attention", "concatenate", "conv2d", "conv_transpose2d", "current_tape",
    "default_dtype", "dropout", "functional", "gelu", "grad_check", "group_norm",
    "layer_norm", "linear", "matmul", "multi_head_attention", "no_grad", "pad",
    "precision", "roll", "sigmoid", "softmax", "stack", "tensor", "where",
]
