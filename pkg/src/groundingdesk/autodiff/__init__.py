from .optim import AdamW, AdamWState, adamw_step
from .tensor import (
    Tape,
    Tensor,
    abs_,
    add,
    as_tensor,
    attention,
    bi_attention,
    custom_op,
    backward,
    bilinear_sample,
    clip,
    concat,
    div,
    exp,
    gelu,
    getitem,
    inverse_sigmoid,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    log_sigmoid,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    sample_levels,
    sin,
    cos,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
