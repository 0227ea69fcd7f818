"""Cross-layer attention link prediction for multiplex networks."""

from .embed import Node2VecConfig, Node2VecEmbedder
from .estimators import TransGATClassifier, TransSLEClassifier
from .experiment import MetricsReport, ModelOptions, run_experiment
from .graph import (
    MultiplexGraph,
    build_union_pool,
    inductive_node_split,
    label_for_target,
    load_multiplex,
    max_edge_count,
    parse_multiplex_edgelist,
    stratified_split,
)
from .train import TrainConfig, macro_f1, roc_auc

__all__ = [
    "MetricsReport",
    "ModelOptions",
    "MultiplexGraph",
    "Node2VecConfig",
    "Node2VecEmbedder",
    "TrainConfig",
    "TransGATClassifier",
    "TransSLEClassifier",
    "build_union_pool",
    "inductive_node_split",
    "label_for_target",
    "load_multiplex",
    "macro_f1",
    "max_edge_count",
    "parse_multiplex_edgelist",
    "roc_auc",
    "run_experiment",
    "stratified_split",
]

__version__ = "0.1.0"
