from .gradcheck import GradCheckReport, grad_check, grad_check_report, relative_error
from .ops import (
    activate,
    batchnorm,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    linear,
    maxpool,
    normalize_padding,
    relu,
    sigmoid,
    tanh,
)
from .optim import AdamState, adam_step
from .tensor import Tensor, add, as_tensor, clamp, concat, log, matmul, mean, mul, norm, reshape, sub, tsum, zero_grads

__all__ = [
    "AdamState",
    "GradCheckReport",
    "Tensor",
    "activate",
    "add",
    "adam_step",
    "as_tensor",
    "batchnorm",
    "clamp",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "grad_check",
    "grad_check_report",
    "leaky_relu",
    "linear",
    "log",
    "matmul",
    "maxpool",
    "mean",
    "mul",
    "norm",
    "normalize_padding",
    "relative_error",
    "relu",
    "reshape",
    "sigmoid",
    "sub",
    "tanh",
    "tsum",
    "zero_grads",
]
