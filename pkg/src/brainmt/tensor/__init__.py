"""Minimal float64 tensor engine with reverse-mode autodiff."""

from .core import Tensor, as_tensor, backward, is_grad_enabled, no_grad, zero_grads
from .ops import (
    ACTIVATIONS,
    add,
    apply_activation,
    bce_with_logits,
    broadcast_to,
    concat,
    conv1d_causal,
    conv3d,
    div,
    exp,
    flip,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mse_loss,
    mul,
    power,
    reshape,
    scaled_dot_attention,
    selective_scan,
    silu,
    softmax,
    softplus,
    sub,
    sum,
    take,
    transpose,
)

__all__ = [
    "ACTIVATIONS",
    "Tensor",
    "add",
    "apply_activation",
    "as_tensor",
    "backward",
    "bce_with_logits",
    "broadcast_to",
    "concat",
    "conv1d_causal",
    "conv3d",
    "div",
    "exp",
    "flip",
    "gelu",
    "getitem",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "no_grad",
    "power",
    "reshape",
    "scaled_dot_attention",
    "selective_scan",
    "silu",
    "softmax",
    "softplus",
    "sub",
    "sum",
    "take",
    "transpose",
    "zero_grads",
]
