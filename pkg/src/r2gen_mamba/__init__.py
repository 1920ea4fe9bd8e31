"""Radiology report generation with a selective state-space encoder and a
Transformer decoder, on a from-scratch numpy autodiff core."""

from .config import ModelConfig, TrainConfig
from .core import Tensor, no_grad
from .model import R2GenMamba, nll_loss

__all__ = ["ModelConfig", "TrainConfig", "Tensor", "no_grad", "R2GenMamba", "nll_loss"]
__version__ = "0.1.0"
