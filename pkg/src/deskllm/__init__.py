"""Desk-scale decoder-only transformer with training-free long-context inference."""

__version__ = "0.1.0"

from .config import EngineConfig, ExtensionConfig, ModelConfig, TrainConfig
from .model import KVCache, Transformer, build_model

__all__ = [
    "EngineConfig",
    "ExtensionConfig",
    "KVCache",
    "ModelConfig",
    "TrainConfig",
    "Transformer",
    "build_model",
]
