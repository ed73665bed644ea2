"""Recurrent point review model: review timing and text as one marked point process."""

__version__ = "0.1.0"

from .corpus import BowVector, ItemSequence, Review, Vocabulary
from .models import Model, ModelConfig, ModelKind
from .training import TrainConfig, train

__all__ = [
    "BowVector", "ItemSequence", "Review", "Vocabulary",
    "Model", "ModelConfig", "ModelKind", "TrainConfig", "train",
]
