from .backprop import gradient_check, train, train_best_of
from .errors import (
    CacheError,
    DatasetError,
    NumericalError,
    ONNError,
    OperatorError,
    ShapeError,
    TrainingDivergedError,
)
from .gis import gis_search
from .logger import logger, setup_logger
from .models import ExperimentConfig, GISConfig, LayerSpec, OperatorLibrary, TrainConfig
from .network import NetworkModel, forward, init
from .runner import ExperimentRunner

__all__ = [
    "ExperimentRunner",
    "ExperimentConfig",
    "GISConfig",
    "LayerSpec",
    "NetworkModel",
    "OperatorLibrary",
    "TrainConfig",
    "forward",
    "gis_search",
    "gradient_check",
    "init",
    "train",
    "train_best_of",
    "ONNError",
    "ShapeError",
    "OperatorError",
    "CacheError",
    "DatasetError",
    "NumericalError",
    "TrainingDivergedError",
    "setup_logger",
    "logger",
]
