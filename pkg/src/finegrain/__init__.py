"""Fine-grained classification with k-max pooling, a class-mean embedding loss
and heatmap-distilled localization, in plain numpy."""

from .config import ExperimentConfig
from .data import DatasetSpec, generate_dataset
from .embedding import ClassMeanStore, EmbeddingLoss, JointLoss, update_means
from .localization import BoundingBox, extract_bbox, iou
from .pooling import GlobalKMaxPool, gkmp_forward
from .training import run_recipe

__all__ = [
    "BoundingBox",
    "ClassMeanStore",
    "DatasetSpec",
    "EmbeddingLoss",
    "ExperimentConfig",
    "GlobalKMaxPool",
    "JointLoss",
    "extract_bbox",
    "generate_dataset",
    "gkmp_forward",
    "iou",
    "run_recipe",
    "update_means",
]
