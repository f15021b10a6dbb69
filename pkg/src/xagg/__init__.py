"""Aggregation, evaluation and adversarial robustness of pixel attributions."""

from .aggregate import agg_mean, agg_var, decompose_mse, epsilon_from_dataset, make_stack
from .explain import Heatmap, explain, normalize_heatmap
from .model import Checkpoint, build_reference_cnn, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Heatmap", "agg_mean", "agg_var", "build_reference_cnn", "decompose_mse",
    "epsilon_from_dataset", "explain", "load_checkpoint", "make_stack", "normalize_heatmap",
    "predict", "save_checkpoint", "train",
]
