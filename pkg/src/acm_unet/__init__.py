"""CPU medical-image segmentation stack: CNN encoder + selective-scan blocks
+ wavelet decoder, built on a small numpy reverse-mode tensor engine."""

from .engine import (
    GradTape,
    Parameter,
    Tensor,
    backward,
    elementwise,
    grad_check,
    reduce,
)
from .losses import LossConfig, ce_loss, dice_loss, total_loss
from .metrics import MetricsReport, dsc_metric, evaluate_masks, hd95
from .model import (
    ModelConfig,
    build_model,
    count_params,
    full_config,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamW, cosine_lr
from .training import TrainParams, evaluate, train_loop
from .data import augment, gen_phantoms, read_tensor, sample_phantom, write_tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "GradTape", "backward", "grad_check",
    "elementwise", "reduce",
    "LossConfig", "ce_loss", "dice_loss", "total_loss",
    "MetricsReport", "dsc_metric", "evaluate_masks", "hd95",
    "ModelConfig", "build_model", "count_params", "full_config",
    "load_checkpoint", "save_checkpoint",
    "AdamW", "cosine_lr",
    "TrainParams", "evaluate", "train_loop",
    "augment", "gen_phantoms", "read_tensor", "sample_phantom", "write_tensor",
    "__version__",
]
