from .engine import (
    ShapeError,
    Var,
    as_var,
    backward,
    concat,
    default_dtype,
    dense,
    grad_check,
    matmul,
    set_default_dtype,
    slogdet,
    zero_grads,
)
from .engine import exp, log, mean, relu, reshape, sigmoid, softplus, transpose
from .engine import sum_ as sum  # noqa: A004
from .conv import conv2d, conv2d_np, conv_out_shape, transposed_conv2d, transposed_conv2d_np
from .optim import Adam, poly_decay_lr
from .serial import load_array, save_array

__all__ = [
    "Adam",
    "ShapeError",
    "Var",
    "as_var",
    "backward",
    "concat",
    "conv2d",
    "conv2d_np",
    "conv_out_shape",
    "default_dtype",
    "dense",
    "exp",
    "grad_check",
    "load_array",
    "log",
    "matmul",
    "mean",
    "poly_decay_lr",
    "relu",
    "reshape",
    "save_array",
    "set_default_dtype",
    "sigmoid",
    "slogdet",
    "softplus",
    "sum",
    "transpose",
    "transposed_conv2d",
    "transposed_conv2d_np",
    "zero_grads",
]
