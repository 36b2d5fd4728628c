"""Minimal reverse-mode autodiff over dense numpy tensors."""

from .conv import (
    conv3d,
    conv3d_transposed,
    depthwise_conv3d,
    depthwise_separable_conv3d,
    interpolation_matrix,
    resize_array,
    trilinear_resize,
)
from .functional import (
    add,
    clamp,
    concat,
    div,
    exp,
    global_avg_pool,
    instance_norm,
    leaky_relu,
    log,
    mean,
    mul,
    power,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_channel,
    sub,
    sum,
    take,
)
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "clamp",
    "concat",
    "conv3d",
    "conv3d_transposed",
    "depthwise_conv3d",
    "depthwise_separable_conv3d",
    "div",
    "exp",
    "global_avg_pool",
    "instance_norm",
    "interpolation_matrix",
    "leaky_relu",
    "log",
    "mean",
    "mul",
    "power",
    "relu",
    "reshape",
    "resize_array",
    "scale",
    "sigmoid",
    "softmax_channel",
    "sub",
    "sum",
    "take",
    "trilinear_resize",
]
