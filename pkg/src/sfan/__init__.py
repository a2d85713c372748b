"""Semantic feature attention network (SFAN) for liver tumor segmentation in CT."""

from .model import SFAN, ModelConfig, UNet, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["SFAN", "UNet", "ModelConfig", "build_model", "load_checkpoint", "save_checkpoint"]
