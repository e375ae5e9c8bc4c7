"""Rectified-flow objective, representation-alignment regularizer and Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import NumericalError, SamplingError, ShapeError, TrainingError
from .model import patchify
from .numcore import ops
from .numcore.layers import MLP, Module, ParamFactory
from .numcore.tensor import Tensor, default_dtype, no_grad


@dataclass(frozen=True)
class FlowSchedule:
    """Monotone ``sigma: [0, 1] -> [0, 1]`` with exact endpoints.

    ``shift == 1`` gives ``sigma(t) = t``; other values apply the
    resolution-shift warp ``shift*t / (1 + (shift - 1)*t)``.
    """

    shift: float = 1.0

    def __post_init__(self):
        if self.shift <= 0:
            raise ValueError("shift must be positive")

    def sigma(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.shift == 1.0:
            return t
        return self.shift * t / (1.0 + (self.shift - 1.0) * t)


def uniform_t(rng: np.random.Generator, batch: int) -> np.ndarray:
    return rng.random(batch)


def logit_normal_t(rng: np.random.Generator, batch: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(mean + std * rng.standard_normal(batch))))


T_SAMPLERS: dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "uniform": uniform_t,
    "logit_normal": logit_normal_t,
}


def forward_process(x0: np.ndarray, eps: np.ndarray, t, sched: FlowSchedule = FlowSchedule()) -> np.ndarray:
    """``x_t = (1 - sigma_t) * x0 + sigma_t * eps`` with one ``t`` per batch element."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_process: x0 {x0.shape} and eps {eps.shape} differ")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape[0] != x0.shape[0]:
        raise ShapeError(f"forward_process: {t.shape[0]} timesteps for batch of {x0.shape[0]}")
    if t.min() < 0 or t.max() > 1:
        raise ValueError("timesteps must lie in [0, 1]")
    sigma = sched.sigma(t).reshape((-1,) + (1,) * (x0.ndim - 1))
    return ((1.0 - sigma) * x0 + sigma * eps).astype(x0.dtype)


def _velocity(model, x_t: np.ndarray, t: np.ndarray, cond: Mapping, return_features: bool):
    out = model(Tensor(x_t), t, return_features=return_features, **cond) if return_features else model(
        Tensor(x_t), t, **cond
    )
    return out


def rf_loss(
    model,
    x0: np.ndarray,
    cond: Mapping | None = None,
    sched: FlowSchedule = FlowSchedule(),
    t_sampler: Callable = uniform_t,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
    t: np.ndarray | None = None,
    return_features: bool = False,
):
    """Mean squared error between ``eps - x0`` and the predicted velocity.

    ``eps`` and ``t`` are drawn from ``rng`` unless given. ``model`` is called
    as ``model(x_t, t, **cond)`` and may return a Tensor or an array.
    """
    cond = dict(cond or {})
    x0 = np.asarray(x0, dtype=default_dtype())
    if eps is None or t is None:
        if rng is None:
            raise ValueError("rf_loss needs rng when eps or t are not supplied")
        eps = rng.standard_normal(x0.shape).astype(x0.dtype) if eps is None else eps
        t = t_sampler(rng, x0.shape[0]) if t is None else t
    eps = np.asarray(eps, dtype=x0.dtype)
    x_t = forward_process(x0, eps, t, sched)
    target = Tensor(eps - x0)
    try:
        out = _velocity(model, x_t, np.asarray(t), cond, return_features)
        v, feats = out if return_features else (out, None)
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=x0.dtype))
        if v.shape != target.shape:
            raise ShapeError(f"rf_loss: model output {v.shape} != target {target.shape}")
        diff = ops.sub(target, v)
        loss = ops.mean(ops.mul(diff, diff))
    except NumericalError as exc:
        raise TrainingError(
            f"non-finite rf_loss: {exc}; batch={x0.shape[0]} t=[{np.min(t):.3f}, {np.max(t):.3f}] "
            f"|x0|max={np.abs(x0).max():.3g}"
        ) from exc
    return (loss, feats) if return_features else loss


class RepaEncoder(Module):
    """Frozen per-patch feature map ``g`` plus the trainable projection head ``h``.

    ``g`` is a fixed random MLP over image patches (stand-in for a pretrained
    visual encoder); any module with the same call signature works.
    """

    def __init__(self, patch_size: int, in_channels: int, model_width: int, feature_dim: int = 64,
                 head_hidden: int | None = None, seed: int = 1234, init: ParamFactory | None = None):
        self.patch_size = patch_size
        frozen = ParamFactory(np.random.default_rng(seed))
        self.target = MLP(in_channels * patch_size ** 2, feature_dim, feature_dim, frozen)
        self.target.freeze()
        init = init or ParamFactory(np.random.default_rng(seed + 1))
        self.head = MLP(model_width, head_hidden or 2 * model_width, feature_dim, init, act="silu")

    def target_features(self, x0: np.ndarray) -> np.ndarray:
        with no_grad():
            g = patchify(Tensor(np.asarray(x0, dtype=default_dtype())), self.patch_size)
            return self.target(g.tokens).data


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    dot = ops.sum_(ops.mul(a, b), axis=-1)
    na = ops.power(ops.add(ops.sum_(ops.mul(a, a), axis=-1), eps), 0.5)
    nb = ops.power(ops.add(ops.sum_(ops.mul(b, b), axis=-1), eps), 0.5)
    return ops.div(dot, ops.mul(na, nb))


def alignment_loss(projected: Tensor, target) -> Tensor:
    """Negative mean cosine similarity over all tokens."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if projected.shape != target.shape:
        raise ShapeError(f"alignment: projected features {projected.shape} != target features {target.shape}")
    return ops.neg(ops.mean(cosine_similarity(projected, target)))


def repa_loss(features: Tensor, x0: np.ndarray, enc: RepaEncoder) -> Tensor:
    """Align projected model features ``[B, L, C]`` with frozen per-patch targets ``[B, L, D]``."""
    return alignment_loss(enc.head(features), enc.target_features(x0))


def total_loss(rf: Tensor, repa: Tensor | None, weight: float) -> Tensor:
    if weight < 0:
        raise ValueError("alignment weight must be non-negative")
    if weight == 0 or repa is None:
        return rf
    return ops.add(rf, ops.mul(repa, float(weight)))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 1:
            raise ValueError("guidance_scale must be >= 1")


VelocityFn = Callable[[np.ndarray, np.ndarray, Mapping], np.ndarray]


def model_velocity(model) -> VelocityFn:
    def fn(x, t, cond):
        with no_grad():
            return model(Tensor(x), t, **cond).data
    return fn


def sample(
    velocity: VelocityFn,
    shape: tuple[int, ...],
    cond: Mapping | None = None,
    cfg: SamplerConfig = SamplerConfig(),
    sched: FlowSchedule = FlowSchedule(),
    uncond: Mapping | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Euler integration from ``t = 1`` (noise) to ``t = 0`` on a uniform grid.

    With ``guidance_scale > 1`` the velocity is
    ``v_uncond + scale * (v_cond - v_uncond)``; at scale 1 the unconditional
    branch is never evaluated.
    """
    cond = dict(cond or {})
    if noise is None:
        noise = np.random.default_rng(cfg.seed).standard_normal(shape).astype(default_dtype())
    x = np.asarray(noise).copy()
    ts = np.linspace(1.0, 0.0, cfg.steps + 1)
    sig = sched.sigma(ts)
    batch = shape[0]
    for i in range(cfg.steps):
        t = np.full(batch, ts[i])
        v = np.asarray(velocity(x, t, cond))
        if cfg.guidance_scale != 1.0:
            if uncond is None:
                raise ValueError("guidance_scale > 1 needs an unconditional condition")
            v_u = np.asarray(velocity(x, t, dict(uncond)))
            v = v_u + cfg.guidance_scale * (v - v_u)
        x = x + (sig[i + 1] - sig[i]) * v
        if not np.isfinite(x).all():
            raise SamplingError(f"non-finite sampler state at step {i} (t={ts[i]:.4f})")
    return x
