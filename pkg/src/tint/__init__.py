"""Typhoon intensity transformer on a small numpy autodiff engine."""
from .model import ModelConfig, TintModel, build, count_params, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "ModelConfig",
    "Tape",
    "Tensor",
    "TintModel",
    "backward",
    "build",
    "count_params",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
