"""Multi-scenario CTR ranking with per-behavior scenario tailoring."""

__version__ = "0.1.0"

from .data import SynthConfig, generate
from .encoding import Behavior, FeatureSchema, Instance
from .metrics import EvalReport, ScoredImpression, auc, mann_whitney_u, s_gauc
from .model import ModelConfig, build_model
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "Behavior",
    "EvalReport",
    "FeatureSchema",
    "Instance",
    "ModelConfig",
    "ScoredImpression",
    "SynthConfig",
    "TrainConfig",
    "auc",
    "build_model",
    "evaluate",
    "generate",
    "mann_whitney_u",
    "s_gauc",
    "train",
]
