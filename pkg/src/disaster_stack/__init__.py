"""Disaster image classification: from-scratch CNNs, a ResNet and a stacked GBT meta-model."""

from .errors import CheckpointError, DataError, DisasterStackError, ShapeError, TrainingError
from .labels import CLASS_NAMES, NUM_CLASSES, ClassLabel

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "NUM_CLASSES",
    "CheckpointError",
    "ClassLabel",
    "DataError",
    "DisasterStackError",
    "ShapeError",
    "TrainingError",
]
