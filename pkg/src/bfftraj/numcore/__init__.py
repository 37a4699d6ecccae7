"""Minimal float64 autodiff, Adam and gradient checking."""

from .gradcheck import grad_check
from .io import load_params, save_params
from .optim import AdamState, adam_step
from .tensor import (
    Tensor, add, as_tensor, concat, dropout, embed_linear, layer_norm, matmul, mse, mul,
    relu, reshape, scale, select, softmax_rows, tensor_sum, transpose,
)

__all__ = [
    "Tensor", "add", "as_tensor", "concat", "dropout", "embed_linear", "layer_norm", "matmul",
    "mse", "mul", "relu", "reshape", "scale", "select", "softmax_rows", "tensor_sum", "transpose",
    "AdamState", "adam_step", "grad_check", "load_params", "save_params",
]
