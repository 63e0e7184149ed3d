"""Clustering-guided hyper-connection Mamba network for hyperspectral image classification."""

__version__ = "0.1.0"

from .dataio import HsiCube, SplitSpec, read_container, stratified_split, synth_cube, write_container
from .estimator import MHCHSIClassifier
from .metrics import Metrics, evaluate, metrics_from_confusion
from .model import MHCNetwork, ModelConfig, load_checkpoint, save_checkpoint, train
from .sinkhorn import SinkhornConfig, sinkhorn_project

__all__ = [
    "HsiCube", "MHCHSIClassifier", "MHCNetwork", "Metrics", "ModelConfig", "SinkhornConfig",
    "SplitSpec", "evaluate", "load_checkpoint", "metrics_from_confusion", "read_container",
    "save_checkpoint", "sinkhorn_project", "stratified_split", "synth_cube", "train",
    "write_container",
]
