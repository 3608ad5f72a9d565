"""Transformer translation with fused bi-directional self-attention language models."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config
from .errors import SentfuseError

__all__ = ["TrainConfig", "load_config", "SentfuseError", "__version__"]
