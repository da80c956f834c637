"""BabyNet: 3D residual networks with transformer blocks for birth-weight regression from ultrasound video."""

from .model import BabyNet, ModelConfig, build_model, count_parameters
from .tensor import Tensor, backward, no_grad

__all__ = ["BabyNet", "ModelConfig", "Tensor", "backward", "build_model", "count_parameters", "no_grad"]
__version__ = "0.1.0"
