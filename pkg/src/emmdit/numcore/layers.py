"""Module containers and the few parameterized layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype


class ParamFactory:
    """Creates parameter arrays.

    With ``rng=None`` every array is ``np.zeros`` and nothing is written, so a
    full-size model can be instantiated for shape/size inspection without
    touching its memory.
    """

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng

    @property
    def materialize(self) -> bool:
        return self.rng is not None

    def zeros(self, shape) -> Parameter:
        return Parameter(np.zeros(shape, dtype=default_dtype()))

    def normal(self, shape, std: float) -> Parameter:
        if self.rng is None:
            return self.zeros(shape)
        return Parameter(self.rng.standard_normal(shape).astype(default_dtype()) * std)

    def xavier(self, shape: tuple[int, int]) -> Parameter:
        if self.rng is None:
            return self.zeros(shape)
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return Parameter(self.rng.uniform(-bound, bound, size=shape).astype(default_dtype()))


class Module:
    """Minimal parameter container: parameters and submodules are plain attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: ParamFactory, bias: bool = True, zero: bool = False):
        self.weight = init.zeros((d_in, d_out)) if zero else init.xavier((d_in, d_out))
        self.bias = init.zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class MLP(Module):
    """Two linear layers with an activation between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, init: ParamFactory, act: str = "gelu"):
        self.fc1 = Linear(d_in, d_hidden, init)
        self.fc2 = Linear(d_hidden, d_out, init)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = ops.gelu(h) if self.act == "gelu" else ops.silu(h)
        return self.fc2(h)


class Embedding(Module):
    def __init__(self, rows: int, width: int, init: ParamFactory, std: float = 0.02):
        self.table = init.normal((rows, width), std)

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.table, ids)
