"""Residual 1-D CNN for gearbox fault classification from raw vibration frames."""

from .augment import AugmentConfig, augment_batch
from .data import Dataset, SynthConfig, generate_synthetic, read_dataset, write_dataset
from .estimator import GearboxCNNClassifier
from .model import Architecture, init_params, parameter_count, predict
from .trainer import TrainConfig, crossval, train

__all__ = [
    "Architecture",
    "AugmentConfig",
    "Dataset",
    "GearboxCNNClassifier",
    "SynthConfig",
    "TrainConfig",
    "augment_batch",
    "crossval",
    "generate_synthetic",
    "init_params",
    "parameter_count",
    "predict",
    "read_dataset",
    "train",
    "write_dataset",
]

__version__ = "0.1.0"
