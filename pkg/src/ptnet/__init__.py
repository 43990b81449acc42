"""Pyramid transformer for paired image-to-image synthesis, built on numpy with hand-written backward passes."""

from .errors import ConfigError, DataError, DegenerateInputError, DimensionError, NumericError, PTNetError, StateError
from .kernels import BACKEND
from .model import PTNet, PTNetConfig, build_model, load_checkpoint, ptnet_l, ptnet_s, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "NumericError",
    "PTNet",
    "PTNetConfig",
    "PTNetError",
    "StateError",
    "build_model",
    "load_checkpoint",
    "ptnet_l",
    "ptnet_s",
    "save_checkpoint",
]
