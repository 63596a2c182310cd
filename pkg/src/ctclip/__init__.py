"""Dual-branch (convolutional + transformer) leaf disease classifier with
prompt-based text features, built on a small numpy autograd."""

from .config import ModelConfig, RunConfig, Toggles, TrainConfig, desk_config, load_run_config
from .data import Dataset, generate_synthetic, load_image_folder
from .errors import ConfigError, CTClipError, DataError, FormatError, ShapeError, StateError
from .model import CTClip
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "CTClip", "CTClipError", "ConfigError", "DataError", "Dataset", "FormatError",
    "ModelConfig", "RunConfig", "ShapeError", "StateError", "Tensor", "Toggles",
    "TrainConfig", "desk_config", "generate_synthetic", "load_image_folder",
    "load_run_config", "no_grad",
]
