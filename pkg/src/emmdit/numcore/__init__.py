"""Dense tensors with reverse-mode differentiation on top of numpy."""

from . import checkpoint
from .gradcheck import grad_check
from .layers import MLP, Embedding, Linear, Module, ParamFactory
from .ops import (
    OPS,
    add,
    broadcast_to,
    concat,
    div,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    neg,
    power,
    reshape,
    rms_norm,
    silu,
    slice_,
    softmax,
    split,
    sub,
    sum_,
    transpose,
)
from .tensor import (
    MacCounter,
    Parameter,
    Tensor,
    as_tensor,
    count_macs,
    default_dtype,
    get_precision,
    grad_enabled,
    no_grad,
    precision,
    set_precision,
    topological_order,
)

__all__ = [
    "OPS", "MLP", "Embedding", "Linear", "MacCounter", "Module", "ParamFactory", "Parameter", "Tensor",
    "add", "as_tensor", "broadcast_to", "checkpoint", "concat", "count_macs", "default_dtype", "div",
    "embedding", "gelu", "get_precision", "grad_check", "grad_enabled", "layer_norm", "linear", "matmul",
    "mean", "mul", "neg", "no_grad", "power", "precision", "reshape", "rms_norm", "set_precision", "silu",
    "slice_", "softmax", "split", "sub", "sum_", "topological_order", "transpose",
]
