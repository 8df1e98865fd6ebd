"""Minimal reverse-mode autodiff, layers, SGD and checkpoints."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, check_gradients, relative_error
from .layers import BatchNorm, Conv2d, ConvTranspose2d, Linear, Module, SharedMLP
from .optim import Sgd, SgdConfig, sgd_step
from .tensor import Tensor, no_grad

__all__ = [
    "ops", "Tensor", "no_grad", "Module", "Linear", "BatchNorm", "Conv2d",
    "ConvTranspose2d", "SharedMLP", "Sgd", "SgdConfig", "sgd_step",
    "save_checkpoint", "load_checkpoint", "check_gradients", "relative_error",
    "GradCheckResult",
]
