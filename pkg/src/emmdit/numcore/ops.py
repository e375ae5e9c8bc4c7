"""Differentiable primitives.

Every public function here is registered in :data:`OPS` under its primitive
name and produces its output through :func:`make_result`, which attaches the
backward closure. Closures return one gradient per tensor input (``None`` for
inputs that are not differentiable, such as integer indices).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, _record_macs, as_tensor, make_result

OPS: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# -- elementwise arithmetic ---------------------------------------------------

@register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result("add", a.data + b.data, (a, b), backward)


@register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result("sub", a.data - b.data, (a, b), backward)


@register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", ad * bd, (a, b), backward)


@register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), backward)


@register("neg")
def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


@register("power")
def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    p = float(exponent)

    if p == 2.0:
        out = xd * xd
    elif p == 0.5:
        out = np.sqrt(xd)
    else:
        out = xd ** p

    def backward(g):
        if p == 2.0:
            return (2.0 * g * xd,)
        if p == 0.5:
            return (0.5 * g / out,)
        return (g * p * xd ** (p - 1.0),)

    return make_result("power", out, (x,), backward)


# -- linear algebra -----------------------------------------------------------

@register("matmul")
def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} are not broadcastable") from None
    ad, bd = a.data, b.data
    m, k, n = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    _record_macs("matmul", math.prod(batch) * m * k * n)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), backward)


@register("linear")
def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    rows = xd.size // xd.shape[-1]
    _record_macs("linear", rows * wd.shape[0] * wd.shape[1])
    x2d = xd.reshape(rows, wd.shape[0])
    out = (x2d @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match output width {wd.shape[1]}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        g2d = g.reshape(rows, -1)
        gx = (g2d @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2d.T @ g2d if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2d.sum(axis=0)

    return make_result("linear", out, inputs, backward)


# -- normalization and activations -------------------------------------------

@register("layer_norm")
def layer_norm(x, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis without affine parameters."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result("layer_norm", xhat, (x,), backward)


@register("rms_norm")
def rms_norm(x, eps: float = 1e-6) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def backward(g):
        return (inv * (g - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    return make_result("rms_norm", xhat, (x,), backward)


@register("softmax")
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return make_result("softmax", y, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


@register("gelu")
def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd  # np.power on float arrays is far slower than repeated products
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + th)
    out = xd * half

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * xd * (1.0 - th * th) * dinner),)

    return make_result("gelu", out, (x,), backward)


@register("silu")
def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def backward(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return make_result("silu", xd * sig, (x,), backward)


# -- shape manipulation -------------------------------------------------------

@register("reshape")
def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


@register("transpose")
def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_axis(a, x.ndim, "transpose") for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    # Materialize so downstream ops never operate on strided views.
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result("transpose", out, (x,), lambda g: (g.transpose(inverse),))


@register("broadcast_to")
def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, tuple(shape)))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return make_result("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, src),))


@register("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ax = _axis(axis, tensors[0].ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


@register("split")
def split(x, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    x = as_tensor(x)
    ax = _axis(axis, x.ndim, "split")
    if sum(sizes) != x.shape[ax] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split: sizes {list(sizes)} do not partition axis of length {x.shape[ax]}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + size)
        key = tuple(index)

        def backward(g, key=key):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[key] = g
            return (full,)

        pieces.append(make_result("split", np.ascontiguousarray(x.data[key]), (x,), backward))
        start += size
    return pieces


@register("slice")
def slice_(x, key) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is rejected."""
    x = as_tensor(x)
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if not (isinstance(part, (slice, int, np.integer)) or part is Ellipsis or part is None):
            raise ShapeError("slice: only basic indexing (ints, slices, Ellipsis) is supported")
    try:
        out = np.ascontiguousarray(x.data[key])
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    if out.size == 0:
        raise ShapeError(f"slice {key!r} of shape {x.shape} is empty")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return make_result("slice", out, (x,), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_axis(a, ndim, op) for a in axis))


@register("sum")
def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim, "sum")
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return make_result("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward)


@register("mean")
def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim, "mean")
    src = x.shape
    count = math.prod(src[a] for a in axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return make_result("mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), backward)


# -- lookup ---------------------------------------------------------------------

@register("embedding")
def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table with {table.shape[0]} rows")
    rows = table.shape

    def backward(g):
        full = np.zeros(rows, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[-1]))
        return (full,)

    return make_result("embedding", table.data[ids], (table,), backward)
