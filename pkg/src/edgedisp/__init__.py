"""Edge-aware stereo disparity estimation on a from-scratch autodiff engine."""

from .tensor import Tensor, set_debug_checks
from .ops import ConvSpec, ShapeError
from .network import ModelParams, NetworkConfig
from .losses import LossWeights

__all__ = [
    "Tensor", "set_debug_checks", "ConvSpec", "ShapeError",
    "ModelParams", "NetworkConfig", "LossWeights",
]

__version__ = "0.1.0"
