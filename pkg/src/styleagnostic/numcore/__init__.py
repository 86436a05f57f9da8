"""Minimal dense-tensor core with reverse-mode differentiation."""

from .functional import (
    add,
    concat,
    conv2d,
    count_multiplies,
    div,
    exp,
    flatten,
    global_avg_pool,
    instance_norm,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    square,
    sub,
    sum,
    take,
)
from .gradcheck import check_directional, check_gradients, numeric_grad, relative_error
from .optim import SGD, cosine_lr, sgd_step
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [name for name in dir() if not name.startswith("_")]
