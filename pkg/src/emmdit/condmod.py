"""Timestep conditioning, per-block modulation and fixed 2D positional tables.

The global modulation vector has width ``6*C`` laid out as
``(shift, scale, gate)`` for the attention sub-layer followed by
``(shift, scale, gate)`` for the feed-forward sub-layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import ops
from .numcore.layers import Linear, Module, ParamFactory
from .numcore.tensor import Tensor, default_dtype
from .tokenpath import TokenGrid

MOD_CHUNKS = 6


def timestep_frequencies(t, dim: int = 256, max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features ``[cos | sin]`` of ``scale * t``, shape ``[B, dim]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if not np.isfinite(t).all():
        raise ValueError("timesteps must be finite")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = (scale * t)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=-1)
    return emb.astype(default_dtype())


class TimestepEmbedder(Module):
    def __init__(self, width: int, init: ParamFactory, freq_dim: int = 256):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, width, init)
        self.fc2 = Linear(width, width, init)

    def __call__(self, t) -> Tensor:
        h = self.fc1(Tensor(timestep_frequencies(t, self.freq_dim)))
        return self.fc2(ops.silu(h))


class GlobalModulator(Module):
    """Shared projection from the conditioning embedding to ``6*C`` modulation scalars."""

    def __init__(self, width: int, init: ParamFactory, zero: bool = False):
        self.linear = Linear(width, MOD_CHUNKS * width, init, zero=zero)

    def __call__(self, c: Tensor) -> Tensor:
        return self.linear(ops.silu(c))


@dataclass
class GlobalModulation:
    s_hat: Tensor  # [B, 6C], computed once per forward and shared by all blocks

    @property
    def width(self) -> int:
        return self.s_hat.shape[-1]


def timestep_embed(
    t,
    embedder: TimestepEmbedder,
    modulator: GlobalModulator,
    extra: Tensor | None = None,
) -> tuple[GlobalModulation, Tensor]:
    """Global modulation from timesteps ``t`` in ``[0, 1]``.

    ``extra`` (e.g. a class embedding ``[B, C]``) is added to the timestep
    embedding before the shared projection. Returns the modulation and the
    conditioning embedding itself (used by the output head).
    """
    c = embedder(t)
    if extra is not None:
        c = ops.add(c, extra)
    return GlobalModulation(modulator(c)), c


class BlockAffine(Module):
    """Per-block ``beta`` (and ``gamma`` for the affine variant), zero-initialized."""

    def __init__(self, width: int, init: ParamFactory, affine: bool = True):
        size = MOD_CHUNKS * width
        self.gamma = init.zeros((size,)) if affine else None
        self.beta = init.zeros((size,))

    @property
    def affine(self) -> bool:
        return self.gamma is not None


def block_modulation(g: GlobalModulation, a: BlockAffine) -> Tensor:
    """``S_hat * (1 + gamma) + beta``; without ``gamma`` this is ``S_hat + beta``."""
    if a.beta.shape[-1] != g.width or (a.gamma is not None and a.gamma.shape[-1] != g.width):
        raise ShapeError(f"block_modulation: global width {g.width} != block affine width {a.beta.shape[-1]}")
    s = g.s_hat
    if a.gamma is not None:
        s = ops.mul(s, ops.add(a.gamma, 1.0))
    return ops.add(s, a.beta)


def modulation_chunks(s: Tensor) -> list[Tensor]:
    """Split ``[B, 6C]`` into six ``[B, 1, C]`` tensors."""
    b, width = s.shape
    c = width // MOD_CHUNKS
    return [ops.reshape(piece, (b, 1, c)) for piece in ops.split(s, [c] * MOD_CHUNKS, axis=-1)]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ops.add(ops.mul(x, ops.add(scale, 1.0)), shift)


@dataclass(frozen=True)
class PositionalTable:
    """Fixed 2D sine/cosine embedding: first half of channels encodes the row, second half the column."""

    pe: np.ndarray  # [H*W, C]
    height: int
    width: int

    @classmethod
    def build(cls, height: int, width: int, channels: int, base: float = 10000.0) -> PositionalTable:
        if channels % 4:
            raise ConfigError(f"positional table needs channels divisible by 4, got {channels}")
        quarter = channels // 4
        omega = 1.0 / base ** (np.arange(quarter, dtype=np.float64) / quarter)
        rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")

        def encode(pos):
            args = pos.reshape(-1, 1).astype(np.float64) * omega[None, :]
            return np.concatenate([np.sin(args), np.cos(args)], axis=1)

        pe = np.concatenate([encode(rows), encode(cols)], axis=1)
        return cls(pe, height, width)

    @property
    def channels(self) -> int:
        return self.pe.shape[1]


def apply_pe(g: TokenGrid, table: PositionalTable) -> TokenGrid:
    if (g.height, g.width, g.channels) != (table.height, table.width, table.channels):
        raise ShapeError(
            f"apply_pe: grid {g.height}x{g.width}x{g.channels} does not match table "
            f"{table.height}x{table.width}x{table.channels}"
        )
    pe = Tensor(table.pe[None].astype(g.tokens.dtype))
    return TokenGrid(ops.add(g.tokens, pe), g.height, g.width)
