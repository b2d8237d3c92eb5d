"""Volumetric U-Net with dilated residual blocks, built on a small numpy autodiff engine."""

from .architecture import Model, NetworkConfig, build_model, count_parameters, load_model, save_model
from .losses import MetricsReport, bce_loss, combined_loss, dice_loss, evaluate_metrics
from .tensor import Tensor, no_grad
from .volume import Volume

__all__ = [
    "Model",
    "NetworkConfig",
    "build_model",
    "count_parameters",
    "load_model",
    "save_model",
    "MetricsReport",
    "bce_loss",
    "combined_loss",
    "dice_loss",
    "evaluate_metrics",
    "Tensor",
    "no_grad",
    "Volume",
]
