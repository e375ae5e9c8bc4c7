"""Alternating subregion attention.

A pattern ``(region_num, chunk_size)`` = ``(s, n)`` splits a length-``L``
sequence viewed as ``(l, s, n)`` so that region ``j`` holds, for every
``l``, the chunk of ``n`` consecutive tokens starting at ``(l*s + j)*n``.
``(1, 1)`` is full attention. Alternating patterns across blocks lets
information cross region boundaries without any extra layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import ops
from .numcore.layers import Linear, Module, ParamFactory
from .numcore.tensor import Tensor


@dataclass(frozen=True)
class AsaPattern:
    region_num: int = 1
    chunk_size: int = 1

    def __post_init__(self):
        if int(self.region_num) < 1 or int(self.chunk_size) < 1:
            raise ConfigError(f"ASA pattern needs region_num >= 1 and chunk_size >= 1, got {self}")

    @property
    def is_full(self) -> bool:
        return self.region_num == 1

    def check(self, length: int) -> None:
        s, n = self.region_num, self.chunk_size
        if length % (s * n):
            raise ConfigError(
                f"sequence length L={length} is not divisible by region_num*chunk_size "
                f"(s={s}, n={n}, s*n={s * n})"
            )

    def region_of(self, length: int) -> np.ndarray:
        """Region index of every position ``0..length-1``."""
        self.check(length)
        return (np.arange(length) // self.chunk_size) % self.region_num

    def __str__(self) -> str:
        return f"{self.region_num}:{self.chunk_size}"


FULL = AsaPattern(1, 1)


@dataclass(frozen=True)
class AsaSchedule:
    """Per-block patterns; block ``i`` uses ``patterns[i % len(patterns)]``."""

    patterns: tuple[AsaPattern, ...] = (AsaPattern(1, 1), AsaPattern(4, 1), AsaPattern(4, 4))

    def __post_init__(self):
        if not self.patterns:
            raise ConfigError("ASA schedule needs at least one pattern")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[int]]) -> AsaSchedule:
        return cls(tuple(AsaPattern(int(s), int(n)) for s, n in pairs))

    @classmethod
    def full(cls) -> AsaSchedule:
        return cls((FULL,))

    def to_pairs(self) -> list[list[int]]:
        return [[p.region_num, p.chunk_size] for p in self.patterns]

    def pattern_for(self, block_index: int) -> AsaPattern:
        return self.patterns[block_index % len(self.patterns)]

    def __str__(self) -> str:
        return "(" + ", ".join(str(p) for p in self.patterns) + ")"


def divide(x: Tensor, pattern: AsaPattern) -> Tensor:
    """``b (l s n) c -> (b s) (l n) c``."""
    b, length, c = x.shape
    pattern.check(length)
    s, n = pattern.region_num, pattern.chunk_size
    l = length // (s * n)
    y = ops.reshape(x, (b, l, s, n, c))
    y = ops.transpose(y, (0, 2, 1, 3, 4))
    return ops.reshape(y, (b * s, l * n, c))


def undivide(x: Tensor, pattern: AsaPattern, batch: int) -> Tensor:
    """Inverse of :func:`divide`: ``(b s) (l n) c -> b (l s n) c``."""
    bs, ln, c = x.shape
    s, n = pattern.region_num, pattern.chunk_size
    if bs != batch * s:
        raise ShapeError(f"undivide: leading dim {bs} is not batch {batch} x region_num {s}")
    if ln % n:
        raise ShapeError(f"undivide: region length {ln} not divisible by chunk_size {n}")
    l = ln // n
    y = ops.reshape(x, (batch, s, l, n, c))
    y = ops.transpose(y, (0, 2, 1, 3, 4))
    return ops.reshape(y, (batch, l * s * n, c))


class AttentionWeights(Module):
    """Fused q/k/v projection and output projection for one token stream."""

    def __init__(self, width: int, head_count: int, init: ParamFactory):
        if width % head_count:
            raise ConfigError(f"width {width} is not divisible by head_count {head_count}")
        self.head_count = head_count
        self.head_dim = width // head_count
        self.qkv = Linear(width, 3 * width, init)
        self.proj = Linear(width, width, init)

    @property
    def width(self) -> int:
        return self.head_count * self.head_dim


def _heads(x: Tensor, heads: int) -> Tensor:
    b, m, c = x.shape
    return ops.transpose(ops.reshape(x, (b, m, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, m, d = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, m, h * d))


def _replicate(x: Tensor, times: int) -> Tensor:
    if times == 1:
        return x
    b, t, c = x.shape
    y = ops.broadcast_to(ops.reshape(x, (b, 1, t, c)), (b, times, t, c))
    return ops.reshape(y, (b * times, t, c))


def attend(
    x: Tensor,
    w: AttentionWeights,
    pattern: AsaPattern = FULL,
    context: Tensor | None = None,
    context_weights: AttentionWeights | None = None,
    return_probs: bool = False,
):
    """Multi-head attention restricted to the regions of ``pattern``.

    Without ``context`` returns the ``[B, L, C]`` output. With ``context``
    (``[B, T, C]``) the context tokens are replicated into every region for
    joint attention (context first, then the region's tokens) and the
    context outputs are averaged over regions; returns ``(x_out, ctx_out)``.
    ``context_weights`` gives the context stream its own projections.
    With ``return_probs`` the attention probabilities
    ``[B*s, heads, M, M]`` are appended to the result.
    """
    if x.ndim != 3:
        raise ShapeError(f"attend expects [B, L, C], got {x.shape}")
    b, length, c = x.shape
    if c != w.width:
        raise ShapeError(f"attend: channel width {c} != heads*head_dim {w.width}")
    pattern.check(length)
    s = pattern.region_num
    q, k, v = (divide(t, pattern) for t in ops.split(w.qkv(x), [c, c, c], axis=-1))

    t_len = 0
    if context is not None:
        cw = context_weights or w
        if context.ndim != 3 or context.shape[0] != b or context.shape[2] != c:
            raise ShapeError(f"attend: context {context.shape} must be [B={b}, T, C={c}]")
        if cw.width != c or cw.head_count != w.head_count:
            raise ShapeError("attend: context projections must match head layout of the image stream")
        t_len = context.shape[1]
        cq, ck, cv = (_replicate(t, s) for t in ops.split(cw.qkv(context), [c, c, c], axis=-1))
        q, k, v = (ops.concat([ct, it], axis=1) for ct, it in ((cq, q), (ck, k), (cv, v)))

    qh, kh, vh = (_heads(t, w.head_count) for t in (q, k, v))
    scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(w.head_dim))
    probs = ops.softmax(scores, axis=-1)
    out = _merge_heads(ops.matmul(probs, vh))

    if context is None:
        result = w.proj(undivide(out, pattern, b))
        return (result, probs) if return_probs else result

    ctx_out, img_out = ops.split(out, [t_len, out.shape[1] - t_len], axis=1)
    x_out = w.proj(undivide(img_out, pattern, b))
    ctx_out = ops.mean(ops.reshape(ctx_out, (b, s, t_len, c)), axis=1)
    ctx_out = (context_weights or w).proj(ctx_out)
    return (x_out, ctx_out, probs) if return_probs else (x_out, ctx_out)


def reference_attention(
    x: np.ndarray,
    w: AttentionWeights,
    context: np.ndarray | None = None,
    context_weights: AttentionWeights | None = None,
):
    """Plain numpy full joint attention, looping over batch and heads.

    Independent of :func:`attend`; used as its oracle.
    """
    cw = context_weights or w

    def proj(arr, lin):
        out = arr @ lin.weight.data
        return out + lin.bias.data if lin.bias is not None else out

    b, length, c = x.shape
    heads, d = w.head_count, w.head_dim
    qkv = proj(x, w.qkv)
    t_len = 0
    if context is not None:
        t_len = context.shape[1]
        qkv = np.concatenate([proj(context, cw.qkv), qkv], axis=1)
    q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]
    out = np.zeros((b, t_len + length, c), dtype=x.dtype)
    for bi in range(b):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            logits = q[bi, :, sl] @ k[bi, :, sl].T / math.sqrt(d)
            logits = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            out[bi, :, sl] = p @ v[bi, :, sl]
    x_out = proj(out[:, t_len:], w.proj)
    if context is None:
        return x_out
    return x_out, proj(out[:, :t_len], cw.proj)


def per_region_reference(
    x: np.ndarray,
    w: AttentionWeights,
    pattern: AsaPattern,
    context: np.ndarray | None = None,
    context_weights: AttentionWeights | None = None,
):
    """Run :func:`reference_attention` on each region's token subset separately.

    Region membership comes from the index formula, not from :func:`divide`.
    """
    length = x.shape[1]
    regions = pattern.region_of(length)
    out = np.zeros_like(x)
    ctx_acc = None
    for j in range(pattern.region_num):
        idx = np.nonzero(regions == j)[0]
        res = reference_attention(x[:, idx], w, context, context_weights)
        if context is None:
            out[:, idx] = res
        else:
            out[:, idx] = res[0]
            ctx_acc = res[1] if ctx_acc is None else ctx_acc + res[1]
    if context is None:
        return out
    return out, ctx_acc / pattern.region_num


def interaction_graph(schedule: AsaSchedule, length: int, depth: int) -> np.ndarray:
    """Boolean ``[L, L]`` adjacency: tokens sharing a region in any of the first ``depth`` blocks."""
    adj = np.eye(length, dtype=bool)
    for i in range(depth):
        regions = schedule.pattern_for(i).region_of(length)
        adj |= regions[:, None] == regions[None, :]
    return adj


def reachability(adj: np.ndarray) -> np.ndarray:
    """Transitive closure of a boolean adjacency matrix."""
    reach = adj.copy()
    while True:
        nxt = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
        if (nxt == reach).all():
            return reach
        reach = nxt


def connected_components(adj: np.ndarray) -> int:
    reach = reachability(adj | adj.T)
    return len({tuple(row) for row in reach})
