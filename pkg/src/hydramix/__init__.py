"""HydraMix-Net: semi-supervised nucleus classification with centroid regression, on a numpy autodiff engine."""
from .data import DatasetSpec
from .losses import JointLossConfig, SceConfig
from .model import ModelConfig, build, forward, load_model, predict, save_model
from .training import Hyperparams, evaluate, sweep, train

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec",
    "Hyperparams",
    "JointLossConfig",
    "ModelConfig",
    "SceConfig",
    "build",
    "evaluate",
    "forward",
    "load_model",
    "predict",
    "save_model",
    "sweep",
    "train",
]
