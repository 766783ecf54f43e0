"""Camera-radar fusion detector with ray-constrained attention, on a synthetic scene harness."""

from .config import ConfigError, PipelineConfig, TrainConfig
from .geometry import Box3D

__version__ = "0.1.0"

__all__ = ["Box3D", "ConfigError", "PipelineConfig", "TrainConfig", "__version__"]
