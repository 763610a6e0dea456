"""Minimal reverse-mode engine: fixed layer set, NAdam, gradient checking."""

from .checkpoint import load_arrays, save_arrays, split_optimizer
from .gradcheck import GradCheckReport, grad_check
from .layers import (BatchNorm, Conv2d, Dense, LayerSpec, MaxPool, MeanPool, Module, PreActConv, Sequential,
                     make_layer)
from .optim import NAdam, OptimizerState, nadam_step
from .tensor import Tensor, constant, no_grad, parameter
from . import tensor as ops

__all__ = [
    "BatchNorm", "Conv2d", "Dense", "GradCheckReport", "LayerSpec", "MaxPool", "MeanPool", "Module", "NAdam",
    "OptimizerState", "PreActConv", "Sequential", "Tensor", "constant", "grad_check", "load_arrays",
    "make_layer", "nadam_step", "no_grad", "ops", "parameter", "save_arrays", "split_optimizer",
]
