"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .functional import (
    BN_EPS,
    BN_MOMENTUM,
    BatchNormState,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_output_size,
    global_avg_pool,
    maxpool2d,
    relu,
    sigmoid,
    upsample_bilinear,
    upsample_nearest2x,
)
from .finite_diff import gradcheck, relative_error
from .tensor import (
    ComputeGraph,
    GraphError,
    ShapeError,
    Tensor,
    backward,
    clip,
    default_dtype,
    exp,
    log,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "BatchNormState",
    "ComputeGraph",
    "GraphError",
    "ShapeError",
    "Tensor",
    "backward",
    "batchnorm2d",
    "clip",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "default_dtype",
    "exp",
    "global_avg_pool",
    "gradcheck",
    "log",
    "maxpool2d",
    "no_grad",
    "precision",
    "relative_error",
    "relu",
    "set_default_dtype",
    "sigmoid",
    "upsample_bilinear",
    "upsample_nearest2x",
]
