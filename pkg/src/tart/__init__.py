"""Tree classifiers as chains of column-stochastic transition matrices."""

from .data import Dataset, load_csv, split, standardize
from .model import (
    PRESETS,
    TartModel,
    build_model,
    build_preset,
    classify_family,
    load_model,
    predict,
    save_model,
)
from .train import TrainConfig, evaluate_accuracy, fit
from .tree import TreeShape, layer_widths

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "Dataset",
    "TartModel",
    "TrainConfig",
    "TreeShape",
    "build_model",
    "build_preset",
    "classify_family",
    "evaluate_accuracy",
    "fit",
    "layer_widths",
    "load_csv",
    "load_model",
    "predict",
    "save_model",
    "split",
    "standardize",
]
