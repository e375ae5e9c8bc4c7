"""Closed-form parameter, MAC and token accounting for a :class:`ModelConfig`.

Every count mirrors the live model layer by layer, so the analytical
numbers can be checked against ``EMMDiT.num_parameters()`` and against the
MAC counter instrumenting ``matmul``/``linear``. FLOPs are ``2 * MACs``.
Elementwise work (norms, softmax, activations) is estimated at
``POINTWISE_OPS`` operations per element and kept out of the matmul totals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import ConfigError

POINTWISE_OPS = 5
MOD_CHUNKS = 6


def _linear(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def _mlp(d_in: int, hidden: int, d_out: int) -> int:
    return _linear(d_in, hidden) + _linear(hidden, d_out)


def _mlp_macs(tokens: int, d_in: int, hidden: int, d_out: int) -> int:
    return tokens * (d_in * hidden + hidden * d_out)


@dataclass
class CostRow:
    name: str
    param_count: int = 0
    mac_count: int = 0
    pointwise: int = 0

    @property
    def flop_count(self) -> int:
        return 2 * self.mac_count


@dataclass
class ParamCounts:
    rows: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(n for _, n in self.rows)

    def as_dict(self) -> dict[str, int]:
        return dict(self.rows)


@dataclass
class FlopsReport:
    config: str
    grid: tuple[int, int]
    context_tokens: int
    rows: list[CostRow] = field(default_factory=list)
    attention_macs: int = 0

    @property
    def param_count(self) -> int:
        return sum(r.param_count for r in self.rows)

    @property
    def mac_count(self) -> int:
        return sum(r.mac_count for r in self.rows)

    @property
    def flop_count(self) -> int:
        return 2 * self.mac_count

    @property
    def attention_flops(self) -> int:
        return 2 * self.attention_macs

    @property
    def pointwise_flops(self) -> int:
        return sum(r.pointwise for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.flop_count / 1e9

    @property
    def mparams(self) -> float:
        return self.param_count / 1e6

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "grid": list(self.grid),
            "context_tokens": self.context_tokens,
            "rows": [
                {"name": r.name, "param_count": r.param_count, "mac_count": r.mac_count,
                 "flop_count": r.flop_count, "pointwise_flops": r.pointwise}
                for r in self.rows
            ],
            "totals": {
                "param_count": self.param_count,
                "mac_count": self.mac_count,
                "flop_count": self.flop_count,
                "attention_flops": self.attention_flops,
                "pointwise_flops": self.pointwise_flops,
            },
        }


def _stream_costs(cfg: ModelConfig, tokens: int, rows: dict[str, CostRow], prefix: str) -> None:
    """Projections, FFN and modulation of one stream in one block over ``tokens`` tokens."""
    c, f = cfg.width, cfg.ffn_multiplier * cfg.width
    proj = rows.setdefault(f"{prefix}attn_proj", CostRow(f"{prefix}attn_proj"))
    proj.param_count += _linear(c, 3 * c) + _linear(c, c)
    proj.mac_count += tokens * (c * 3 * c + c * c)
    ffn = rows.setdefault(f"{prefix}ffn", CostRow(f"{prefix}ffn"))
    ffn.param_count += _mlp(c, f, c)
    ffn.mac_count += _mlp_macs(tokens, c, f, c)
    ffn.pointwise += POINTWISE_OPS * tokens * (f + 2 * c)  # activation + two norms
    mod = rows.setdefault(f"{prefix}modulation", CostRow(f"{prefix}modulation"))
    if cfg.modulation_mode == "adaln":
        mod.param_count += _linear(c, MOD_CHUNKS * c)
        mod.mac_count += c * MOD_CHUNKS * c
    elif cfg.modulation_mode == "adaln_affine":
        mod.param_count += 2 * MOD_CHUNKS * c
    else:
        mod.param_count += MOD_CHUNKS * c


def _attention(cfg: ModelConfig, stages, context_tokens: int) -> tuple[int, int]:
    """Score and value matmul MACs summed over blocks, and the softmax element count."""
    macs = pointwise = 0
    for i, (_, a, b) in enumerate(stages):
        length = a * b
        s = cfg.asa_schedule.pattern_for(i).region_num
        m = length // s + context_tokens
        macs += 2 * s * m * m * cfg.width
        pointwise += s * cfg.head_count * m * m
    return macs, pointwise


def _compression_rows(cfg: ModelConfig, h: int, w: int) -> list[CostRow]:
    c, hc, hr, hf = cfg.width, cfg.hidden_compress, cfg.hidden_recon, cfg.hidden_fuse
    out: list[CostRow] = []
    if not cfg.compression_enabled:
        return out

    def compressor(name, r, gh, gw):
        n = (gh // r) * (gw // r)
        return CostRow(name, _mlp(r * r * c, hc, c), _mlp_macs(n, r * r * c, hc, c), POINTWISE_OPS * n * hc)

    def reconstructor(name, ratios, gh, gw):
        row = CostRow(name)
        for r in ratios:
            n = (gh // r) * (gw // r)
            row.param_count += _mlp(c, hr, r * r * c)
            row.mac_count += _mlp_macs(n, c, hr, r * r * c)
            row.pointwise += POINTWISE_OPS * n * hr
        parts = len(ratios) + int(cfg.use_skip)
        row.param_count += _mlp(parts * c, hf, c)
        row.mac_count += _mlp_macs(gh * gw, parts * c, hf, c)
        row.pointwise += POINTWISE_OPS * gh * gw * hf
        return row

    if cfg.compression == "stacked_2x":
        out.append(compressor("compress2", 2, h, w))
        out.append(compressor("compress2_inner", 2, h // 2, w // 2))
        out.append(reconstructor("recon_inner", (2,), h // 2, w // 2))
        out.append(reconstructor("recon", (2,), h, w))
    else:
        for r in cfg.branch_ratios:
            out.append(compressor(f"compress{r}", r, h, w))
        out.append(reconstructor("recon", cfg.branch_ratios, h, w))
    return out


def default_context_tokens(cfg: ModelConfig) -> int:
    """One class token for dual-stream models, none for the single-stream ablation model."""
    return 1 if cfg.dual_stream else 0


def count_flops(cfg: ModelConfig, grid: tuple[int, int] | None = None, context_tokens: int | None = None) -> FlopsReport:
    """Per-sample forward cost on a ``grid = (height, width)`` token geometry."""
    h, w = grid or cfg.grid
    if h < 1 or w < 1:
        raise ConfigError(f"invalid token grid {h}x{w}")
    cfg.validate((h, w))
    t_len = default_context_tokens(cfg) if context_tokens is None else int(context_tokens)
    if t_len < 0 or (t_len and not cfg.dual_stream):
        raise ConfigError(f"context_tokens={t_len} is invalid for variant {cfg.variant}")
    c, length = cfg.width, h * w
    e = cfg.ctx_width
    rows: dict[str, CostRow] = {}

    rows["patch_embed"] = CostRow("patch_embed", _linear(cfg.patch_dim, c), length * cfg.patch_dim * c)
    temb = CostRow("timestep_embed", _linear(cfg.freq_dim, c) + _linear(c, c), cfg.freq_dim * c + c * c)
    rows["timestep_embed"] = temb
    if cfg.modulation_mode != "adaln":
        rows["global_modulation"] = CostRow("global_modulation", _linear(c, MOD_CHUNKS * c), c * MOD_CHUNKS * c)
    if cfg.dual_stream:
        table = (cfg.num_classes + 1) * e if cfg.num_classes else 0
        table += (cfg.vocab_hash_size + 1) * e if cfg.vocab_hash_size else 0
        rows["context_embed"] = CostRow("context_embed", table + _linear(e, c), t_len * e * c)
    else:
        rows["class_embed"] = CostRow("class_embed", (cfg.num_classes + 1) * c, 0)

    stages = cfg.block_stages((h, w))
    block_rows: dict[str, CostRow] = {}
    for _, a, b in stages:
        _stream_costs(cfg, a * b, block_rows, "blocks.")
        if cfg.dual_stream:
            _stream_costs(cfg, t_len, block_rows, "blocks.context_")
    attn_macs, attn_points = _attention(cfg, stages, t_len if cfg.dual_stream else 0)
    rows["blocks.attention"] = CostRow("blocks.attention", 0, attn_macs, POINTWISE_OPS * attn_points)
    rows.update(block_rows)

    for row in _compression_rows(cfg, h, w):
        rows[row.name] = row
    rows["final"] = CostRow(
        "final", _linear(c, 2 * c) + _linear(c, cfg.out_dim), c * 2 * c + length * c * cfg.out_dim,
        POINTWISE_OPS * length * c,
    )
    return FlopsReport(cfg.name, (h, w), t_len, list(rows.values()), attn_macs)


def count_params(cfg: ModelConfig) -> ParamCounts:
    """Exact parameter element count per component (geometry independent)."""
    cfg.validate()
    report = count_flops(cfg, context_tokens=0 if not cfg.dual_stream else None)
    return ParamCounts([(r.name, r.param_count) for r in report.rows if r.param_count])


def adaln_overhead(cfg: ModelConfig) -> int:
    """Per-block modulation scalars across all blocks and streams (excluding the shared projection)."""
    per = {"adaln": _linear(cfg.width, MOD_CHUNKS * cfg.width), "adaln_affine": 2 * MOD_CHUNKS * cfg.width,
           "adaln_single": MOD_CHUNKS * cfg.width}[cfg.modulation_mode]
    return cfg.depth * (2 if cfg.dual_stream else 1) * per


@dataclass
class TokenBudget:
    grid: tuple[int, int]
    stages: list[tuple[str, int, int]]  # (stage, blocks, tokens per block)

    @property
    def full_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def stage_tokens(self) -> list[int]:
        return [tokens for _, _, tokens in self.stages]

    @property
    def token_blocks(self) -> int:
        return sum(blocks * tokens for _, blocks, tokens in self.stages)

    @property
    def mid_reduction(self) -> float:
        """Fraction of tokens removed in the middle block group, averaged over its blocks."""
        mid = [(b, t) for name, b, t in self.stages if name not in ("full_in", "full_out")]
        blocks = sum(b for b, _ in mid)
        if not blocks:
            return 0.0
        return 1.0 - sum(b * t for b, t in mid) / (blocks * self.full_tokens)

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "stages": [{"stage": s, "blocks": b, "tokens": t} for s, b, t in self.stages],
            "token_blocks": self.token_blocks,
            "mid_reduction": self.mid_reduction,
        }


def token_budget(cfg: ModelConfig, grid: tuple[int, int] | None = None) -> TokenBudget:
    h, w = grid or cfg.grid
    cfg.validate((h, w))
    n1, n2, n3 = cfg.block_groups
    full = h * w
    if not cfg.compression_enabled:
        mid = [("mid", n2, full)]
    elif cfg.compression == "stacked_2x":
        outer = n2 // 4
        mid = [("half", outer, full // 4), ("quarter", n2 - 2 * outer, full // 16), ("half", outer, full // 4)]
    else:
        mid = [("compressed", n2, sum((h // r) * (w // r) for r in cfg.branch_ratios))]
    return TokenBudget((h, w), [("full_in", n1, full), *mid, ("full_out", n3, full)])


def live_counts(cfg: ModelConfig, grid: tuple[int, int] | None = None, seed: int = 0) -> tuple[int, int]:
    """Parameter elements and instrumented forward MACs of an instantiated model (batch 1)."""
    from .model import build_model
    from .numcore.tensor import count_macs, no_grad

    model = build_model(cfg, seed=seed)
    h, w = grid or cfg.grid
    p = cfg.patch_size
    x = np.random.default_rng(seed).standard_normal((1, cfg.in_channels, h * p, w * p))
    labels = [0] if cfg.num_classes else None
    captions = None if cfg.num_classes or not cfg.dual_stream else ["a"]
    with no_grad(), count_macs() as counter:
        model(x, np.array([0.5]), labels=labels, captions=captions)
    return model.num_parameters(), counter.total


# -- rendering -----------------------------------------------------------------


def render_text(report: FlopsReport, budget: TokenBudget | None = None) -> str:
    lines = [
        f"config {report.config}  grid {report.grid[0]}x{report.grid[1]}  context tokens {report.context_tokens}",
        f"{'component':<26}{'params':>14}{'MACs':>18}{'GFLOPs':>12}",
    ]
    for r in report.rows:
        lines.append(f"{r.name:<26}{r.param_count:>14,}{r.mac_count:>18,}{r.flop_count / 1e9:>12.4f}")
    lines.append("-" * 70)
    lines.append(f"{'total':<26}{report.param_count:>14,}{report.mac_count:>18,}{report.gflops:>12.4f}")
    lines.append(f"params (M)      {report.mparams:.2f}")
    lines.append(f"FLOPs (G)       {report.gflops:.2f}   (2 FLOPs per MAC, matmuls only)")
    lines.append(f"attention (G)   {report.attention_flops / 1e9:.4f}   (score and value matmuls)")
    lines.append(f"pointwise (G)   {report.pointwise_flops / 1e9:.4f}   (not included above)")
    if budget is not None:
        stages = ", ".join(f"{s}:{t}x{b}" for s, b, t in budget.stages)
        lines.append(f"tokens          {stages}  mid-stage reduction {100 * budget.mid_reduction:.2f}%")
    return "\n".join(lines)


def render_json(report: FlopsReport, budget: TokenBudget | None = None) -> str:
    data = report.to_dict()
    if budget is not None:
        data["tokens"] = budget.to_dict()
    return json.dumps(data, indent=2)


def analyze(cfg: ModelConfig, grid: tuple[int, int] | None = None, as_json: bool = False) -> str:
    report = count_flops(cfg, grid)
    budget = token_budget(cfg, grid)
    return render_json(report, budget) if as_json else render_text(report, budget)


__all__ = [
    "CostRow", "FlopsReport", "ParamCounts", "TokenBudget", "adaln_overhead", "analyze", "count_flops",
    "count_params", "default_context_tokens", "live_counts", "render_json", "render_text", "token_budget",
]
