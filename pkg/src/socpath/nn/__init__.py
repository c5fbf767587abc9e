"""Autodiff tape, controller networks, optimiser and checkpoints."""

from .autodiff import Tape, Var
from .layers import BiRecurrentController, MlpController, build_controller, parameter_count
from .optim import Adam, sgd_step

__all__ = [
    "Adam",
    "BiRecurrentController",
    "MlpController",
    "Tape",
    "Var",
    "build_controller",
    "parameter_count",
    "sgd_step",
]
