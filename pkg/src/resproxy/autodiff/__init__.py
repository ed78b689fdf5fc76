"""Reverse-mode automatic differentiation over dense float64 tensors."""
from .gradcheck import grad_check
from .nn import BatchNormState, batch_norm, conv3d, trilinear_upsample, voxel_shuffle
from .ops import (
    add, clip, concat, div, exp, getitem, leaky_relu, log, log1p, matmul, mean, mse, mul, neg, pad,
    power, relu, reshape, scale, sqrt, square, sub, sum, take, where_mask,
)
from .tensor import GraphConsumedError, Tensor, as_tensor, backward, enable_grad, is_grad_enabled, no_grad

__all__ = [
    "BatchNormState", "GraphConsumedError", "Tensor", "add", "as_tensor", "backward",
    "batch_norm", "clip", "concat", "conv3d", "div", "enable_grad", "exp", "getitem", "grad_check",
    "is_grad_enabled", "leaky_relu", "log", "log1p", "matmul", "mean", "mse", "mul", "neg", "no_grad",
    "pad", "power", "relu", "reshape", "scale", "sqrt", "square", "sub", "sum", "take",
    "trilinear_upsample", "voxel_shuffle", "where_mask",
]
