"""Minimal float64 autodiff kernel: tensors, tape, AdamW, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check
from .optim import OptimizerState, adamw_step, cosine_lr, init_optimizer
from .rng import RngState
from .tensor import (
    Array,
    ComputationRecord,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cross_entropy_logits,
    gelu,
    kl_divergence,
    layer_norm,
    masked_softmax,
    masked_softmax_array,
    matmul,
    mul,
    narrow,
    recording,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
    squared_error,
    sub,
    tanh,
    transpose,
    zero_grads,
)

__all__ = [
    "Array", "ComputationRecord", "OptimizerState", "RngState", "Tensor",
    "adamw_step", "add", "as_tensor", "backward", "broadcast_to", "concat",
    "cosine_lr", "cross_entropy_logits", "finite_difference_check", "gelu",
    "init_optimizer", "kl_divergence", "layer_norm", "load_checkpoint",
    "masked_softmax", "masked_softmax_array", "matmul", "mul", "narrow",
    "recording", "reduce_mean",
    "reduce_sum", "reshape", "save_checkpoint", "scale", "softmax",
    "squared_error", "sub", "tanh", "transpose", "zero_grads",
]
