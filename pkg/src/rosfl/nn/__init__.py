from .gradcheck import finite_diff_grad, relative_error
from .layers import (
    DEFAULT_DTYPE,
    DTYPES,
    LAYER_KINDS,
    Conv1x1,
    Conv3x3,
    ConcatChannels,
    Layer,
    MaxPool2x2,
    Relu,
    SoftmaxChannels,
    UpsampleNearest2x,
    ensure_finite,
    uniform_fan_in,
)
from .optim import Adam, Sgd, make_optimizer
from .params import ParamSet
from .rng import stream

__all__ = [
    "DEFAULT_DTYPE",
    "DTYPES",
    "LAYER_KINDS",
    "Adam",
    "ConcatChannels",
    "Conv1x1",
    "Conv3x3",
    "Layer",
    "MaxPool2x2",
    "ParamSet",
    "Relu",
    "Sgd",
    "SoftmaxChannels",
    "UpsampleNearest2x",
    "ensure_finite",
    "finite_diff_grad",
    "make_optimizer",
    "relative_error",
    "stream",
    "uniform_fan_in",
]
