"""Learned joint communication and sensing: autoencoder transmitter, radar detector and angle estimator."""

from .channel import ArrayConfig, NoiseConfig
from .model import JcasModel
from .training import TrainConfig, train, validate

__version__ = "0.1.0"

__all__ = ["ArrayConfig", "NoiseConfig", "JcasModel", "TrainConfig", "train", "validate", "__version__"]
