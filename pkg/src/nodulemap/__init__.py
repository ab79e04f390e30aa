"""Attention-mapped nodule classification on synthetic phantoms.

A small, self-contained stack: a numpy-backed autodiff engine, a
UNet-plus-residual classifier with CAM / Grad-CAM / per-channel
attention heads, a parametric nodule phantom generator standing in for
scan data, and the training, statistics and report plumbing around it.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FormatError,
    GraphError,
    MapUndefinedError,
    NumericError,
    ShapeError,
)
from .checkpoint import load_model, save_model
from .layers import SgdConfig
from .model import Model, ModelConfig, build_model
from .phantom import NoduleDataset, generate_dataset, kfold_split, read_dataset, write_dataset
from .saliency import AttentionMap, cam, compute_map, gradcam, sam_map
from .stats import WilcoxonResult, wilcoxon
from .tensor import Tensor, no_grad
from .training import Metrics, evaluate, train

__all__ = [
    "AttentionMap",
    "ConfigError",
    "FormatError",
    "GraphError",
    "MapUndefinedError",
    "Metrics",
    "Model",
    "ModelConfig",
    "NoduleDataset",
    "NumericError",
    "SgdConfig",
    "ShapeError",
    "Tensor",
    "WilcoxonResult",
    "build_model",
    "cam",
    "compute_map",
    "evaluate",
    "generate_dataset",
    "gradcam",
    "kfold_split",
    "load_model",
    "no_grad",
    "read_dataset",
    "sam_map",
    "save_model",
    "train",
    "wilcoxon",
    "write_dataset",
    "__version__",
]
