"""Saliency-guided cross-layer deep feature fusion for white blood cell analysis."""
from .core import (CheckpointError, ConfigError, DataError, ExperimentConfig, SGError, ShapeError,
                   TrainError, load_checkpoint, load_config, save_checkpoint, seed_all)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "ExperimentConfig", "SGError", "ShapeError",
    "TrainError", "load_checkpoint", "load_config", "save_checkpoint", "seed_all",
]
