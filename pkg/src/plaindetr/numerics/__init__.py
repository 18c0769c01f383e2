"""Minimal float64 tensor engine with reverse-mode autodiff."""
from .checkpoint import load_arrays, save_arrays
from .gradcheck import finite_diff_check, sample_coords
from .module import FeedForward, LayerNorm, Linear, Module, param
from .optim import AdamW, OptimState, adamw_step, clip_grad_norm
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_add,
    broadcast_mul,
    broadcast_to,
    clamp,
    concat,
    debug_checks,
    debug_enabled,
    detach,
    div,
    exp,
    getitem,
    layer_norm,
    linear,
    log,
    log_sigmoid,
    matmul,
    maximum,
    mean,
    minimum,
    np_sigmoid,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax_last,
    square,
    stack,
    sub,
    swap_last,
    tabs,
    transpose,
    tsum,
    where,
)
