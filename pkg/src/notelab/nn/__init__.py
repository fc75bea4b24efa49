from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concatenate,
    default_dtype,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    layernorm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    precision,
    reshape,
    softmax,
    sub,
    sum_,
    take_along_last,
    tanh,
    transpose,
)
from .optim import AdamW, OptimizerState, ScheduleConfig, adamw_step, lr_at

__all__ = [
    "AdamW",
    "OptimizerState",
    "ScheduleConfig",
    "Tensor",
    "adamw_step",
    "add",
    "as_tensor",
    "backward",
    "concatenate",
    "default_dtype",
    "div",
    "dropout",
    "embedding",
    "exp",
    "gelu",
    "layernorm",
    "log",
    "log_softmax",
    "lr_at",
    "matmul",
    "mean",
    "mul",
    "precision",
    "reshape",
    "softmax",
    "sub",
    "sum_",
    "take_along_last",
    "tanh",
    "transpose",
]
