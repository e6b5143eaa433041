"""Dense tensors with reverse-mode differentiation, parameters and optimizers."""

from .gradcheck import finite_diff_check
from .optim import AdamW, LinearWarmupDecay
from .params import CheckpointError, ParamStore, load_arrays, save_arrays
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    custom,
    embedding,
    exp,
    expand_dims,
    gather,
    getitem,
    is_grad_enabled,
    linear,
    log,
    log_softmax,
    log_sum_exp,
    lstm_cell,
    lstm_layer,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    scale,
    set_debug,
    sigmoid,
    stack,
    sub,
    sum,
    tanh,
    where,
)

__all__ = [
    "AdamW", "CheckpointError", "LinearWarmupDecay", "ParamStore", "ShapeError", "Tensor",
    "add", "as_tensor", "concat", "custom", "embedding", "exp", "expand_dims",
    "finite_diff_check", "gather", "getitem", "is_grad_enabled", "linear", "load_arrays",
    "log", "log_softmax", "log_sum_exp", "lstm_cell", "lstm_layer", "matmul", "mean", "mul", "neg",
    "no_grad", "reshape", "save_arrays", "scale", "set_debug", "sigmoid", "stack", "sub",
    "sum", "tanh", "where",
]
