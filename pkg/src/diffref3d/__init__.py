"""Diffusion-based refinement of 3D box proposals on synthetic point clouds."""

from .boxes import ConfigError, InvalidBoxError, decode, encode, iou_3d
from .config import InferConfig, TrainConfig
from .pipeline import DiffRef3D, evaluate, infer, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiffRef3D",
    "InferConfig",
    "InvalidBoxError",
    "TrainConfig",
    "decode",
    "encode",
    "evaluate",
    "infer",
    "iou_3d",
    "train",
]
