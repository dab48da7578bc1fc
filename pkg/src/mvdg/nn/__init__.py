"""Minimal tensor autodiff and the layers used by the multi-view model."""

from .tensor import (
    Tensor,
    add,
    concat,
    grad_enabled,
    matmul,
    max_along,
    mean_along,
    no_grad,
    stack,
    sum_along,
)
from .layers import (
    BatchNorm1d,
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    Module,
    ModuleList,
    Parameter,
    ReLU,
    Sequential,
    batch_norm,
    conv2d,
    cross_entropy,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
    softmax,
    to_channels_first,
    to_channels_last,
)
from .backbone import Backbone, BackboneConfig, BasicBlock, BottleneckBlock, build_backbone
from .gradcheck import GradCheckReport, check_gradients

__all__ = [
    "Tensor",
    "add",
    "concat",
    "grad_enabled",
    "matmul",
    "max_along",
    "mean_along",
    "no_grad",
    "stack",
    "sum_along",
    "BatchNorm1d",
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "MaxPool2d",
    "Module",
    "ModuleList",
    "Parameter",
    "ReLU",
    "Sequential",
    "batch_norm",
    "conv2d",
    "cross_entropy",
    "global_avg_pool",
    "linear",
    "maxpool2d",
    "relu",
    "softmax",
    "to_channels_first",
    "to_channels_last",
    "Backbone",
    "BackboneConfig",
    "BasicBlock",
    "BottleneckBlock",
    "build_backbone",
    "GradCheckReport",
    "check_gradients",
]
