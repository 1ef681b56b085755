"""Two-scale disentangled speech representations with adversarial
domain-invariance, plus the evaluation harness around them."""

from .estimator import DisentangledSpeechEncoder
from .losses import LossFlags, LossWeights
from .model import Fhvae, ModelConfig, PriorConfig
from .trainer import TrainingConfig

__all__ = [
    "DisentangledSpeechEncoder",
    "Fhvae",
    "LossFlags",
    "LossWeights",
    "ModelConfig",
    "PriorConfig",
    "TrainingConfig",
]

__version__ = "0.1.0"
