"""Selective state space layers and camera pose regression on numpy."""

from .model import MambaLoc, ModelConfig
from .train import RunRecord, TrainConfig

__all__ = ["MambaLoc", "ModelConfig", "RunRecord", "TrainConfig"]
__version__ = "0.1.0"
