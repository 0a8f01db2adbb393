"""Numeric substrate: tensors with autodiff, seeded RNG streams, schedules, SGD."""

from .optim import SgdMomentum, clip_grad_norm
from .rng import Rng
from .schedule import (
    ScheduleSpec,
    cosine_schedule,
    exp_decay_schedule,
    warmup_cosine_schedule,
)
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clip,
    cosine_similarity,
    dot,
    grad_check,
    l2_normalize,
    log_softmax_temp,
    matmul,
    mul,
    no_grad,
    param,
    relu,
    scale_rows,
    softmax_temp,
    sum_axis,
    take_per_row,
    texp,
    tlog,
    tmean,
    transpose,
    tsqrt,
    tsum,
    zero_grads,
)

__all__ = [
    "Rng",
    "ScheduleSpec",
    "SgdMomentum",
    "Tensor",
    "add",
    "as_tensor",
    "clip",
    "clip_grad_norm",
    "cosine_schedule",
    "cosine_similarity",
    "dot",
    "exp_decay_schedule",
    "grad_check",
    "l2_normalize",
    "log_softmax_temp",
    "matmul",
    "mul",
    "no_grad",
    "param",
    "relu",
    "scale_rows",
    "softmax_temp",
    "sum_axis",
    "take_per_row",
    "texp",
    "tlog",
    "tmean",
    "transpose",
    "tsqrt",
    "tsum",
    "warmup_cosine_schedule",
    "zero_grads",
]
