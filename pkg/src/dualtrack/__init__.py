"""Dual-template Siamese tracker plus an efficiency benchmark simulator."""

__version__ = "0.1.0"

from .boxes import BBox, iou
from .model import ModelConfig, TrackerNet, build_model, count_cost
from .tracker import TrackerConfig, init, step, track_video

__all__ = [
    "BBox",
    "iou",
    "ModelConfig",
    "TrackerNet",
    "build_model",
    "count_cost",
    "TrackerConfig",
    "init",
    "step",
    "track_video",
    "__version__",
]
