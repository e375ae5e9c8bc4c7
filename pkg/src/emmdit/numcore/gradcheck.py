from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor, no_grad


def _scalar(f: Callable[[], Tensor]) -> float:
    value = f()
    out = float(np.asarray(value.data).reshape(-1)[0]) if value.size == 1 else None
    if out is None:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {value.shape}")
    if not np.isfinite(out):
        raise NumericalError(f"function value is not finite: {out}")
    return out


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` is called with no arguments when ``x`` is a sequence of tensors
    (typically model parameters closed over by ``f``) and with ``x`` itself
    when a single tensor is given. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_coords`` limits the number of
    perturbed coordinates per tensor, sampled with ``rng``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(x, Tensor)
    tensors = [x] if single else list(x)
    call = (lambda: f(x)) if single else f

    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = call()
    if not np.isfinite(out.data).all():
        raise NumericalError("function value is not finite")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                original = flat[i]
                flat[i] = original + eps
                up = _scalar(call)
                flat[i] = original - eps
                down = _scalar(call)
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                a = float(grad.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
