"""TakuNet: a lightweight CNN for aerial emergency-scene classification, in numpy."""

from .config import ArchConfig, TrainConfig
from .model import TakuNet, build_model
from .tensor import Precision

__version__ = "0.1.0"

__all__ = ["ArchConfig", "TrainConfig", "TakuNet", "build_model", "Precision", "__version__"]
