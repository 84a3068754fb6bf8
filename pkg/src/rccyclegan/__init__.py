"""Conditional cycle-consistent rain image generation at several intensities."""

from .config import LossWeights, TrainConfig
from .models import RainIntensity

__version__ = "0.1.0"

__all__ = ["LossWeights", "RainIntensity", "TrainConfig", "__version__"]
