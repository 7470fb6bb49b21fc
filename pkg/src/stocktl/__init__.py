"""Transfer learning and data augmentation for daily stock classification."""

from .backtest import MetricsReport, classification_metrics, information_ratio
from .config import ExperimentConfig, preset_config
from .data import ReturnsPanel, StudyPeriod, generate_splits, generate_synthetic_panel
from .network import ModelState, TrainConfig, init_params, train, transfer

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "MetricsReport", "ModelState", "ReturnsPanel", "StudyPeriod",
    "TrainConfig", "classification_metrics", "generate_splits", "generate_synthetic_panel",
    "information_ratio", "init_params", "preset_config", "train", "transfer",
]
