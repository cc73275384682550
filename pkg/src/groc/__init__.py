"""Adversarially robust graph contrastive learning (GROC) and its baselines."""

__version__ = "0.1.0"

from .config import build_config
from .encoder import embed
from .graph import Graph, load_graph, preprocess, receptive_fields, sbm_generate, save_graph
from .trainer import TrainConfig, train, train_baseline, train_groc

__all__ = [
    "Graph",
    "TrainConfig",
    "build_config",
    "embed",
    "load_graph",
    "preprocess",
    "receptive_fields",
    "save_graph",
    "sbm_generate",
    "train",
    "train_baseline",
    "train_groc",
]
