"""Model assembly: dual-stream (or single-stream) blocks around the compression path."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import config as config_mod
from .asa import AsaPattern, AttentionWeights, attend
from .condmod import (
    BlockAffine,
    GlobalModulation,
    GlobalModulator,
    PositionalTable,
    TimestepEmbedder,
    apply_pe,
    block_modulation,
    modulate,
    modulation_chunks,
    timestep_embed,
)
from .config import ModelConfig
from .errors import ConfigError, EmmditError, ShapeError
from .numcore import ops
from .numcore.layers import MLP, Embedding, Linear, Module, ParamFactory
from .numcore.tensor import Parameter, Tensor
from .tokenpath import Reconstructor, TokenGrid, compress, compress_branch, joint_tokens, reconstruct


class StreamWeights(Module):
    """Attention, feed-forward and modulation parameters of one token stream in one block."""

    def __init__(self, cfg: ModelConfig, init: ParamFactory):
        c = cfg.width
        self.attn = AttentionWeights(c, cfg.head_count, init)
        self.mlp = MLP(c, cfg.ffn_multiplier * c, c, init)
        self.mode = cfg.modulation_mode
        if self.mode == "adaln":
            self.adaln = Linear(c, 6 * c, init, zero=True)
        else:
            self.affine = BlockAffine(c, init, affine=self.mode == "adaln_affine")

    def modulation(self, gmod: GlobalModulation | None, cond: Tensor) -> Tensor:
        if self.mode == "adaln":
            return self.adaln(ops.silu(cond))
        return block_modulation(gmod, self.affine)


class Block(Module):
    def __init__(self, cfg: ModelConfig, init: ParamFactory):
        self.image = StreamWeights(cfg, init)
        self.context = StreamWeights(cfg, init) if cfg.dual_stream else None
        self.eps = cfg.norm_eps

    def __call__(self, x: Tensor, ctx: Tensor | None, gmod, cond: Tensor, pattern: AsaPattern):
        ix = modulation_chunks(self.image.modulation(gmod, cond))
        hx = modulate(ops.layer_norm(x, self.eps), ix[0], ix[1])
        if ctx is None or self.context is None:
            a = attend(hx, self.image.attn, pattern)
            ac = None
        else:
            cx = modulation_chunks(self.context.modulation(gmod, cond))
            hc = modulate(ops.layer_norm(ctx, self.eps), cx[0], cx[1])
            a, ac = attend(hx, self.image.attn, pattern, hc, self.context.attn)
        x = ops.add(x, ops.mul(ix[2], a))
        x = ops.add(x, ops.mul(ix[5], self.image.mlp(modulate(ops.layer_norm(x, self.eps), ix[3], ix[4]))))
        if ac is not None:
            ctx = ops.add(ctx, ops.mul(cx[2], ac))
            ctx = ops.add(ctx, ops.mul(cx[5], self.context.mlp(modulate(ops.layer_norm(ctx, self.eps), cx[3], cx[4]))))
        return x, ctx


class FinalLayer(Module):
    def __init__(self, cfg: ModelConfig, init: ParamFactory):
        c = cfg.width
        self.adaln = Linear(c, 2 * c, init, zero=True)
        self.linear = Linear(c, cfg.out_dim, init, zero=True)
        self.eps = cfg.norm_eps

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c = cond.shape
        shift, scale = (ops.reshape(p, (b, 1, c)) for p in ops.split(self.adaln(ops.silu(cond)), [c, c], axis=-1))
        return self.linear(modulate(ops.layer_norm(x, self.eps), shift, scale))


def caption_buckets(caption: str, vocab_size: int) -> list[int]:
    """Stable hash bucket of every whitespace-separated word."""
    return [
        int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little") % vocab_size
        for word in caption.split()
    ]


class ContextEmbedder(Module):
    """Stand-in text encoder: hashed word embeddings, and a class table for class conditioning."""

    def __init__(self, cfg: ModelConfig, init: ParamFactory):
        e = cfg.ctx_width
        self.vocab_size = cfg.vocab_hash_size
        self.num_classes = cfg.num_classes
        self.classes = Embedding(cfg.num_classes + 1, e, init) if cfg.num_classes else None
        self.words = Embedding(cfg.vocab_hash_size, e, init) if cfg.vocab_hash_size else None
        self.null = init.normal((1, e), 0.02) if cfg.vocab_hash_size else None

    def embed_classes(self, labels) -> Tensor:
        if self.classes is None:
            raise ConfigError("model has no class table (num_classes == 0)")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1, 1)
        return self.classes(labels)

    def embed_captions(self, captions: Sequence[str]) -> Tensor:
        if self.words is None:
            raise ConfigError("model has no caption vocabulary (vocab_hash_size == 0)")
        ids = [caption_buckets(c, self.vocab_size) for c in captions]
        lengths = {len(i) for i in ids}
        if len(lengths) != 1:
            raise ShapeError(f"captions in one batch must have equal word counts, got {sorted(lengths)}")
        if lengths == {0}:
            return ops.broadcast_to(ops.reshape(self.null, (1, 1, self.null.shape[1])), (len(ids), 1, self.null.shape[1]))
        return self.words(np.asarray(ids, dtype=np.int64))


def context_embed(condition, model: EMMDiT) -> Tensor:
    """Context token sequence ``[1, T, E]`` for one caption (``str``) or class id (``int``)."""
    if model.context_embedder is None:
        raise ConfigError("single-stream variant has no context stream")
    if isinstance(condition, (bytes, bytearray)):
        condition = condition.decode("utf-8")
    if isinstance(condition, str):
        return model.context_embedder.embed_captions([condition])
    return model.context_embedder.embed_classes([int(condition)])


@dataclass
class BlockRecord:
    index: int
    stage: str
    tokens: int
    pattern: AsaPattern


def patchify(x: Tensor, p: int) -> TokenGrid:
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"patchify: {h}x{w} input not divisible by patch size {p}")
    y = ops.reshape(x, (b, c, h // p, p, w // p, p))
    y = ops.transpose(y, (0, 2, 4, 3, 5, 1))
    return TokenGrid(ops.reshape(y, (b, (h // p) * (w // p), p * p * c)), h // p, w // p)


def unpatchify(tokens: Tensor, p: int, height: int, width: int, channels: int) -> Tensor:
    b = tokens.shape[0]
    y = ops.reshape(tokens, (b, height, width, p, p, channels))
    y = ops.transpose(y, (0, 5, 1, 3, 2, 4))
    return ops.reshape(y, (b, channels, height * p, width * p))


class EMMDiT(Module):
    """Velocity-prediction transformer.

    ``init`` controls parameter creation; pass ``ParamFactory(None)`` to build
    a zero-filled model for size inspection only.
    """

    def __init__(self, cfg: ModelConfig, init: ParamFactory | None = None, seed: int = 0):
        cfg.validate()
        init = init or ParamFactory(np.random.default_rng(seed))
        self.cfg = cfg
        c = cfg.width
        self.x_embed = Linear(cfg.patch_dim, c, init)
        self.t_embed = TimestepEmbedder(c, init, cfg.freq_dim)
        self.global_mod = GlobalModulator(c, init, zero=True) if cfg.modulation_mode != "adaln" else None
        self.y_embed = Embedding(cfg.num_classes + 1, c, init) if not cfg.dual_stream else None
        self.context_embedder = ContextEmbedder(cfg, init) if cfg.dual_stream else None
        self.context_proj = Linear(cfg.ctx_width, c, init) if cfg.dual_stream else None
        self.blocks = [Block(cfg, init) for _ in range(cfg.depth)]

        hc, hr, hf = cfg.hidden_compress, cfg.hidden_recon, cfg.hidden_fuse
        for r in cfg.branch_ratios:
            setattr(self, f"compress{r}", MLP(r * r * c, hc, c, init))
        if cfg.compression == "stacked_2x":
            self.compress2_inner = MLP(4 * c, hc, c, init)
            self.recon_inner = Reconstructor(c, (2,), init, hr, hf, cfg.use_skip)
        self.recon = Reconstructor(c, cfg.branch_ratios, init, hr, hf, cfg.use_skip) if cfg.compression_enabled else None
        self.final = FinalLayer(cfg, init)

        gh, gw = cfg.grid
        self._tables: dict[tuple[int, int], PositionalTable] = {}
        self.pe = self.table(gh, gw)
        self.trace: list[BlockRecord] = []

    def table(self, h: int, w: int) -> PositionalTable:
        if (h, w) not in self._tables:
            self._tables[(h, w)] = PositionalTable.build(h, w, self.cfg.width)
        return self._tables[(h, w)]

    def _pr(self, which: str) -> bool:
        mode = self.cfg.position_reinforcement
        return mode == "both" or mode == f"{which}_only"

    def _maybe_pe(self, g: TokenGrid, which: str) -> TokenGrid:
        return apply_pe(g, self.table(g.height, g.width)) if self._pr(which) else g

    def condition(self, labels=None, context: Tensor | None = None, captions=None) -> Tensor | None:
        """Context-stream tokens ``[B, T, C]`` from raw embeddings, labels or captions."""
        if self.context_embedder is None:
            return None
        if context is None:
            if captions is not None:
                context = self.context_embedder.embed_captions(captions)
            elif labels is not None:
                context = self.context_embedder.embed_classes(labels)
            else:
                raise ValueError("dual-stream model needs context embeddings, labels or captions")
        return self.context_proj(context)

    def null_labels(self, batch: int) -> np.ndarray:
        return np.full(batch, self.cfg.num_classes, dtype=np.int64)

    def _run(self, start: int, count: int, x: Tensor, ctx, gmod, cond, stage: str):
        for i in range(start, start + count):
            pattern = self.cfg.asa_schedule.pattern_for(i)
            self.trace.append(BlockRecord(i, stage, x.shape[1], pattern))
            try:
                x, ctx = self.blocks[i](x, ctx, gmod, cond, pattern)
            except EmmditError as exc:
                raise type(exc)(f"block {i}: {exc}") from exc
        return x, ctx, start + count

    def forward(self, x, t, labels=None, context: Tensor | None = None, captions=None, return_features: bool = False):
        """Predict velocity for noised inputs ``x`` of shape ``[B, C_in, H, W]`` at times ``t``."""
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"forward expects [B, {cfg.in_channels}, H, W], got {x.shape}")
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        self.trace = []

        grid = patchify(x, cfg.patch_size)
        cfg.validate((grid.height, grid.width))
        grid = TokenGrid(self.x_embed(grid.tokens), grid.height, grid.width)
        grid = apply_pe(grid, self.table(grid.height, grid.width))

        extra = None
        if self.y_embed is not None:
            if labels is None:
                labels = self.null_labels(b)
            extra = self.y_embed(np.asarray(labels, dtype=np.int64))
        if self.global_mod is not None:
            gmod, cond = timestep_embed(t, self.t_embed, self.global_mod, extra)
        else:
            gmod = None
            cond = self.t_embed(t)
            if extra is not None:
                cond = ops.add(cond, extra)
        ctx = self.condition(labels, context, captions)

        n1, n2, n3 = cfg.block_groups
        h, w = grid.height, grid.width
        tok = grid.tokens
        i = 0
        if not cfg.compression_enabled:
            tok, ctx, i = self._run(0, cfg.depth, tok, ctx, gmod, cond, "full")
            features = tok
        else:
            tok, ctx, i = self._run(i, n1, tok, ctx, gmod, cond, "full")
            features = tok
            skip = TokenGrid(tok, h, w)
            if cfg.compression == "stacked_2x":
                outer = n2 // 4
                inner = n2 - 2 * outer
                g1 = self._maybe_pe(compress_branch(skip, 2, self.compress2), "compressed")
                mid, ctx, i = self._run(i, outer, g1.tokens, ctx, gmod, cond, "half")
                skip2 = TokenGrid(mid, g1.height, g1.width)
                g2 = self._maybe_pe(compress_branch(skip2, 2, self.compress2_inner), "compressed")
                deep, ctx, i = self._run(i, inner, g2.tokens, ctx, gmod, cond, "quarter")
                up = self._maybe_pe(reconstruct(deep, skip2, self.recon_inner), "recon")
                mid, ctx, i = self._run(i, outer, up.tokens, ctx, gmod, cond, "half")
                tok = self._maybe_pe(reconstruct(mid, skip, self.recon), "recon").tokens
            else:
                branches = [(r, getattr(self, f"compress{r}")) for r in cfg.branch_ratios]
                grids = [self._maybe_pe(g, "compressed") for g in compress(skip, branches)]
                joint, ctx, i = self._run(i, n2, joint_tokens(grids), ctx, gmod, cond, "compressed")
                tok = self._maybe_pe(reconstruct(joint, skip, self.recon), "recon").tokens
            tok, ctx, i = self._run(i, n3, tok, ctx, gmod, cond, "full")

        out = self.final(tok, cond)
        v = unpatchify(out, cfg.patch_size, h, w, cfg.out_channels or cfg.in_channels)
        return (v, features) if return_features else v

    __call__ = forward


def randomize(model: Module, rng: np.random.Generator, std: float = 0.1) -> None:
    """Overwrite every parameter with N(0, std^2) draws (tests need non-degenerate weights)."""
    for _, p in model.named_parameters():
        p.data = (rng.standard_normal(p.shape) * std).astype(p.data.dtype)


def build_model(cfg: ModelConfig, seed: int = 0, materialize: bool = True) -> EMMDiT:
    return EMMDiT(cfg, ParamFactory(np.random.default_rng(seed) if materialize else None))


def build_ablation_dit_l2(materialize: bool = False, **overrides) -> tuple[ModelConfig, EMMDiT]:
    """Single-stream DiT-L/2 (24 blocks, width 1024, 16 heads, patch 2, 256 tokens), class-conditional.

    ``overrides`` toggle the individual designs (compression, modulation_mode,
    position_reinforcement, asa_schedule, block_groups, use_skip, ...).
    Parameters are zero-filled and untouched unless ``materialize`` is set.
    """
    cfg = config_mod.dit_l2().replace(**overrides) if overrides else config_mod.dit_l2()
    return cfg, build_model(cfg, materialize=materialize)
