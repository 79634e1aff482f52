"""Desk-scale cross-view image geo-localization toolkit."""

from .autodiff import Tape, Tensor, backward
from .errors import (
    CheckpointError,
    ContractError,
    CrossviewError,
    ManifestError,
    NumericError,
    ShapeError,
    TrainingDiverged,
)
from .losses import LossConfig
from .model import ModelConfig, init_params, init_siamese, param_count, saig_forward
from .train import TrainConfig, train

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "CrossviewError",
    "ShapeError",
    "ContractError",
    "NumericError",
    "ManifestError",
    "CheckpointError",
    "TrainingDiverged",
    "LossConfig",
    "ModelConfig",
    "init_params",
    "init_siamese",
    "param_count",
    "saig_forward",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
