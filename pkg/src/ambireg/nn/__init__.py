"""Minimal numpy neural-network substrate with explicit backward passes."""

from .layers import (
    BatchNorm,
    Conv,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    ReLU,
    Sequential,
    mlp,
)
from .optim import AdamState, adam_step, lr_schedule
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AdamState",
    "BatchNorm",
    "Conv",
    "Dense",
    "Dropout",
    "Flatten",
    "GlobalAvgPool",
    "Layer",
    "ReLU",
    "Sequential",
    "adam_step",
    "load_checkpoint",
    "lr_schedule",
    "mlp",
    "save_checkpoint",
]
