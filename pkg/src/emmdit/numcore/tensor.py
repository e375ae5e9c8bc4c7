"""Dense tensor type and the reverse-mode graph machinery.

A :class:`Tensor` wraps a numpy array. Differentiable primitives (see
:mod:`emmdit.numcore.ops`) attach a :class:`Node` to their output recording
the inputs and a closure that maps the output gradient to input gradients.
:meth:`Tensor.backward` orders the nodes reachable from the output
topologically and runs every closure exactly once in reverse order.

Two scalar widths are supported: ``"standard"`` (float32, used for training)
and ``"wide"`` (float64, used for gradient checks and oracles).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NumericalError, ShapeError

PRECISIONS = {"standard": np.float32, "wide": np.float64}


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True
        self.counters: list[MacCounter] = []


_state = _State()


def set_precision(mode: str) -> None:
    """Select the default floating dtype for newly created tensors."""
    try:
        _state.dtype = PRECISIONS[mode]
    except KeyError:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}") from None


def get_precision() -> str:
    return "wide" if _state.dtype == np.float64 else "standard"


def default_dtype() -> type:
    return _state.dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def grad_enabled() -> bool:
    return _state.grad_enabled


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul executed while active."""

    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


def _record_macs(op: str, macs: int) -> None:
    for counter in _state.counters:
        counter.add(op, macs)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _state.dtype)
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape} is not allowed")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.slice_(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"gradient shape {grad.shape} does not match output shape {self.shape}")

        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for tensor in reversed(order):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor.node
            if node is None:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            for parent, pg in zip(node.inputs, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def topological_order(root: Tensor) -> list[Tensor]:
    """Grad-requiring tensors reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, np.ndarray) and value.dtype.kind == "f":
        return Tensor(value, dtype=value.dtype)
    return Tensor(value)


def make_result(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap a primitive's output, attaching a graph node when gradients are needed."""
    if out.dtype.kind == "f" and not np.isfinite(out).all():
        raise NumericalError(f"{op} produced non-finite values (shape {out.shape})")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.node = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    result.requires_grad = needs
    if needs:
        result.node = Node(op, tuple(inputs), backward)
    return result
