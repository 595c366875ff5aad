"""Minimal float64 neural-network engine with double backpropagation."""

from .autodiff import Tensor, grad, no_grad
from .checkpoint import load_network, save_network
from .layers import Concat, Conv2D, Dense, Flatten, MaxPool2D, conv_out
from .network import (
    Network,
    Scaling,
    ShapeError,
    backward,
    count_variables,
    fit_normalization,
    forward,
    input_gradient,
    parameter_gradients,
)
from .optim import LRSchedule, OptimizerState, TrainConfig, adam_step, fit_regressor, lr_at, train

__all__ = [
    "Tensor", "grad", "no_grad",
    "load_network", "save_network",
    "Concat", "Conv2D", "Dense", "Flatten", "MaxPool2D", "conv_out",
    "Network", "Scaling", "ShapeError", "backward", "count_variables", "fit_normalization",
    "forward", "input_gradient", "parameter_gradients",
    "LRSchedule", "OptimizerState", "TrainConfig", "adam_step", "fit_regressor", "lr_at", "train",
]  # fmt: skip
