"""Minimal reverse-mode autodiff, layer catalogue and optimizers."""

from . import functional
from .layers import (
    BatchNorm2d,
    Concat,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    LeakyReLU,
    MaxPool2x2,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    Softmax,
    Tanh,
    Upsample2x,
)
from .optim import Adam, SGDMomentum, make_optimizer
from .snapshot import dumps as snapshot_dumps, loads as snapshot_loads
from .tensor import Parameter, Tensor

__all__ = [
    "Adam", "BatchNorm2d", "Concat", "Conv2d", "ConvTranspose2d", "Dense", "Dropout",
    "Flatten", "GlobalAvgPool", "Layer", "LeakyReLU", "MaxPool2x2", "Parameter", "ReLU",
    "Reshape", "SGDMomentum", "Sequential", "Sigmoid", "Softmax", "Tanh", "Tensor",
    "Upsample2x", "functional", "make_optimizer", "snapshot_dumps", "snapshot_loads",
]
