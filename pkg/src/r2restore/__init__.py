"""Image restoration with a residual-on-the-residual attention network.

The package is self-contained: a rank-4 autodiff tensor engine, the network
blocks, synthetic degradations, a training loop, quality metrics, and a CLI.
"""

from .tensor import Tensor, Tape, backward
from .model import (ModelConfig, Model, build_model, load_checkpoint,
                    save_checkpoint, self_ensemble_forward)
from .train import TrainConfig, train
from .degrade import DegradationSpec
from .metrics import psnr, ssim, evaluate

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "ModelConfig",
    "Model",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "self_ensemble_forward",
    "TrainConfig",
    "train",
    "DegradationSpec",
    "psnr",
    "ssim",
    "evaluate",
]

__version__ = "0.1.0"
