"""Federated learning with hypernetwork-personalized self-attention."""

from .federation import Simulation, StrategySpec, TrainConfig
from .models import ModelConfig

__all__ = ["ModelConfig", "Simulation", "StrategySpec", "TrainConfig"]
__version__ = "0.1.0"
