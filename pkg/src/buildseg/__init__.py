"""Building-footprint segmentation on a from-scratch numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ConfusionCounts, biou, cross_entropy, iou
from .model import ModelConfig, SegModel
from .train import OptimConfig, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfusionCounts", "ModelConfig", "OptimConfig", "SegModel", "biou", "cross_entropy",
    "iou", "load_checkpoint", "lr_at", "save_checkpoint", "train_loop",
]
