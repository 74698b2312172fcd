"""Image-conditioned occupancy model with a small built-in backprop engine."""

from .layers import Adam
from .model import (
    BCE_EPS,
    CheckpointError,
    FieldModel,
    GradientCheckResult,
    ModelConfig,
    ModelError,
    NonFiniteLoss,
    TrainConfig,
    bce,
    forward_backward,
    gradient_check,
    load_model,
    loss,
    loss_from_logits,
    save_model,
    settle_batchnorm,
    train_step,
)

__all__ = [
    "Adam", "BCE_EPS", "GradientCheckResult", "CheckpointError", "FieldModel", "ModelConfig", "ModelError",
    "NonFiniteLoss", "TrainConfig", "bce", "forward_backward", "gradient_check",
    "load_model", "loss", "loss_from_logits", "save_model", "settle_batchnorm", "train_step",
]
