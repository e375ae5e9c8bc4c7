"""AdamW with decoupled weight decay, learning-rate schedules and parameter EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..numcore.layers import Module
from ..numcore.tensor import Parameter


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    schedule: str = "constant"  # or "cosine"
    warmup_steps: int = 0
    min_lr_ratio: float = 0.0
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant" or total_steps <= self.warmup_steps:
            return self.lr
        progress = min(1.0, (step - self.warmup_steps) / max(1, total_steps - self.warmup_steps))
        floor = self.lr * self.min_lr_ratio
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, named: Sequence[tuple[str, Parameter]], cfg: OptimConfig = OptimConfig()):
        self.cfg = cfg
        self.params = [(n, p) for n, p in named if p.requires_grad]
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        c = self.cfg
        norm = self.grad_norm()
        clip = 1.0
        if c.grad_clip is not None and norm > c.grad_clip:
            clip = c.grad_clip / (norm + 1e-12)
        self.t += 1
        if lr == 0:
            return norm
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * clip if clip != 1.0 else p.grad
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= (lr * update).astype(p.data.dtype)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m/{n}": a for n, a in self.m.items()}
        out.update({f"v/{n}": a for n, a in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, _ in self.params:
            self.m[name] = np.array(state[f"m/{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f"v/{name}"], dtype=self.v[name].dtype)
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])


class EMA:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module: Module, decay: float = 0.999):
        if not 0 <= decay < 1:
            raise ValueError("EMA decay must lie in [0, 1)")
        self.decay = decay
        self.shadow = {n: p.data.copy() for n, p in module.named_parameters()}

    def update(self, module: Module) -> None:
        d = self.decay
        for n, p in module.named_parameters():
            s = self.shadow[n]
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self, module: Module) -> None:
        module.load_state_dict(self.shadow)

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.shadow)

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n in self.shadow:
            self.shadow[n] = np.array(state[n], dtype=self.shadow[n].dtype)
