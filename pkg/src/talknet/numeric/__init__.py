"""Minimal reverse-mode autodiff over numpy arrays, plus optimizer and schedule."""

from talknet.numeric.gradcheck import grad_check
from talknet.numeric.ops import (
    BatchNormState,
    add,
    batch_norm1d,
    conv1d,
    dropout,
    embedding,
    interp_embedding,
    mask_time,
    mse_loss,
    relu,
    reshape,
    weighted_sum,
    xe_loss,
)
from talknet.numeric.optim import Adam, LrSchedule, adam_step, clip_global_norm, global_norm, lr_at
from talknet.numeric.rng import RngState
from talknet.numeric.tensor import (
    Tensor,
    backward,
    get_dtype,
    get_precision,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "Adam",
    "BatchNormState",
    "LrSchedule",
    "RngState",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batch_norm1d",
    "clip_global_norm",
    "conv1d",
    "dropout",
    "embedding",
    "get_dtype",
    "get_precision",
    "global_norm",
    "grad_check",
    "interp_embedding",
    "lr_at",
    "mask_time",
    "mse_loss",
    "no_grad",
    "precision",
    "relu",
    "reshape",
    "set_precision",
    "weighted_sum",
    "xe_loss",
]
