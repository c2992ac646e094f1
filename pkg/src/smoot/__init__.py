"""Saliency-guided mask optimized online training on a small numpy autodiff engine."""

from .data import Dataset, PlantedSpec, generate_planted, load_split
from .models import LinearModel, MnistCNN
from .training import TrainConfig, train

__all__ = [
    "Dataset",
    "LinearModel",
    "MnistCNN",
    "PlantedSpec",
    "TrainConfig",
    "generate_planted",
    "load_split",
    "train",
]
