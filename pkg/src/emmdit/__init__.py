"""Efficient multimodal diffusion transformer with a from-scratch numpy autodiff core."""

from .config import ModelConfig, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    EmmditError,
    NumericalError,
    SamplingError,
    ShapeError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "EmmditError", "ModelConfig", "NumericalError", "SamplingError",
    "ShapeError", "TrainingError", "load_config", "__version__",
]
