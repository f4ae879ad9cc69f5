"""Two-branch early-exit image classifier with a numpy autodiff core."""

from .config import ModelConfig, StageConfig, ImageSpec, get_preset, PRESETS
from .model import DynPerceiver, build_model
from .tensor import Tensor, no_grad, count_flops

__all__ = ["ModelConfig", "StageConfig", "ImageSpec", "get_preset", "PRESETS",
           "DynPerceiver", "build_model", "Tensor", "no_grad", "count_flops"]
__version__ = "0.1.0"
