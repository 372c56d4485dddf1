"""omniqa: blind omnidirectional image quality assessment.

A panorama is scored by two branches: a local branch that detects salient
viewing directions, extracts gnomonic viewports, describes each with a CNN,
and aggregates them over a spatial graph; and a global branch that fuses
two conv streams over the whole panorama by bilinear pooling.  Training,
evaluation metrics, synthetic data generation, and a CLI are included.
"""
from .model import ModelConfig, QualityModel, full_scale_config
from .checkpoint import load_checkpoint, save_checkpoint
from .training import TrainConfig, train_all
from .metrics import EvalReport, evaluate_scores, split_by_reference
from .viewpoint import DetectorConfig

__version__ = "0.1.0"

__all__ = [
    "DetectorConfig", "EvalReport", "ModelConfig", "QualityModel",
    "TrainConfig", "evaluate_scores", "full_scale_config",
    "load_checkpoint", "save_checkpoint", "split_by_reference", "train_all",
    "__version__",
]
