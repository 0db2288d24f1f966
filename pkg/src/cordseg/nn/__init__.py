"""Dense tensor math, the two U-net variants, Dice loss, and Adam."""

from .layers import (
    batch_norm,
    conv2d,
    conv3d,
    dropout,
    maxpool,
    relu,
    sigmoid,
    upsample,
)
from .loss import dice_loss
from .network import NetworkSpec, backward, build_cnn1, build_cnn2, forward
from .optim import AdamState, adam_step
from .params import ModelParams, load_params, save_params

__all__ = [
    "AdamState",
    "ModelParams",
    "NetworkSpec",
    "adam_step",
    "backward",
    "batch_norm",
    "build_cnn1",
    "build_cnn2",
    "conv2d",
    "conv3d",
    "dice_loss",
    "dropout",
    "forward",
    "load_params",
    "maxpool",
    "relu",
    "save_params",
    "sigmoid",
    "upsample",
]
