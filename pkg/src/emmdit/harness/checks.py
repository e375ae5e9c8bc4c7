"""Property suite behind the ``check`` subcommand.

Each check is a zero-argument function returning a short detail string and
raising :class:`CheckFailure` on violation. ``run_checks`` stops at the
first failure unless asked to keep going.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import analyzer, asa, condmod, diffusion
from ..config import ModelConfig
from ..model import build_model, randomize
from ..numcore import checkpoint, ops
from ..numcore.gradcheck import grad_check
from ..numcore.layers import ParamFactory
from ..numcore.tensor import Tensor, no_grad, precision

GRAD_TOL = 1e-4
ATTN_TOL = 1e-6


class CheckFailure(AssertionError):
    pass


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CheckFailure(message)


# -- primitive gradient cases ------------------------------------------------------


def _t(rng, *shape, positive=False):
    a = rng.standard_normal(shape)
    return Tensor(np.abs(a) + 0.5 if positive else a)


def _weighted(out: Tensor, phase: float = 0.3) -> Tensor:
    """Scalar probe ``sum(out * w)`` with fixed, non-uniform weights."""
    w = np.cos(0.7 * np.arange(out.size) + phase).reshape(out.shape)
    return ops.sum_(ops.mul(out, Tensor(w)))


def primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]]:
    """One gradient-check case per registered op, keyed by op name."""

    def binary(op):
        def case(rng):
            a, b = _t(rng, 3, 4), _t(rng, 4, positive=op is ops.div)
            return (lambda: _weighted(op(a, b))), [a, b]
        return case

    def unary(op, *shape, positive=False, **kw):
        def case(rng):
            x = _t(rng, *shape, positive=positive)
            return (lambda: _weighted(op(x, **kw))), [x]
        return case

    def matmul(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
        return (lambda: _weighted(ops.matmul(a, b))), [a, b]

    def linear(rng):
        x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        return (lambda: _weighted(ops.linear(x, w, b))), [x, w, b]

    def concat(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 2)
        return (lambda: _weighted(ops.concat([a, b], axis=1))), [a, b]

    def split(rng):
        x = _t(rng, 2, 5)

        def f():
            p, q = ops.split(x, [2, 3], axis=1)
            return ops.add(_weighted(p), _weighted(q, 1.1))
        return f, [x]

    def embedding(rng):
        table = _t(rng, 5, 3)
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        return (lambda: _weighted(ops.embedding(table, ids))), [table]

    return {
        "add": binary(ops.add),
        "sub": binary(ops.sub),
        "mul": binary(ops.mul),
        "div": binary(ops.div),
        "neg": unary(ops.neg, 3, 4),
        "power": unary(ops.power, 3, 4, positive=True, exponent=1.7),
        "matmul": matmul,
        "linear": linear,
        "layer_norm": unary(ops.layer_norm, 3, 6),
        "rms_norm": unary(ops.rms_norm, 3, 6),
        "softmax": unary(ops.softmax, 3, 5, axis=-1),
        "gelu": unary(ops.gelu, 3, 4),
        "silu": unary(ops.silu, 3, 4),
        "reshape": unary(ops.reshape, 2, 6, shape=(3, 4)),
        "transpose": unary(ops.transpose, 2, 3, 4, axes=(2, 0, 1)),
        "broadcast_to": unary(ops.broadcast_to, 1, 4, shape=(3, 4)),
        "concat": concat,
        "split": split,
        "slice": unary(ops.slice_, 4, 5, key=(slice(1, 3), slice(None, None, 2))),
        "sum": unary(ops.sum_, 3, 4, axis=1),
        "mean": unary(ops.mean, 3, 4, axis=0),
        "embedding": embedding,
    }


def primitive_grad_errors(seed: int = 0) -> dict[str, float]:
    errors = {}
    with precision("wide"):
        for name, case in primitive_cases().items():
            f, inputs = case(np.random.default_rng([seed, len(name)]))
            errors[name] = grad_check(f, inputs)
    return errors


# -- end-to-end gradient ------------------------------------------------------------


def grad_micro_config() -> ModelConfig:
    """Two-block compressed model small enough for finite differences."""
    return ModelConfig(width=64, head_count=2, block_groups=(1, 1, 0), ffn_multiplier=2,
                       image_size=(16, 16), patch_size=2, name="grad_micro")


MICRO_PROBES = (
    "x_embed.weight",
    "t_embed.fc1.weight",
    "global_mod.linear.weight",
    "context_embedder.classes.table",
    "blocks.0.image.attn.qkv.weight",
    "blocks.0.image.affine.gamma",
    "blocks.1.context.mlp.fc1.weight",
    "compress2.fc1.weight",
    "compress4.fc2.bias",
    "recon.up4.fc2.weight",
    "recon.fuse.fc1.weight",
    "final.adaln.weight",
    "final.linear.weight",
)


def model_grad_error(seed: int = 0, coords: int = 6) -> float:
    with precision("wide"):
        cfg = grad_micro_config()
        model = build_model(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        randomize(model, rng, 0.2)
        params = dict(model.named_parameters())
        probes = [params[n] for n in MICRO_PROBES]
        x0 = rng.standard_normal((2, 3, 16, 16))
        eps = rng.standard_normal(x0.shape)
        t = np.array([0.3, 0.8])
        labels = np.array([1, 5])

        def f():
            return diffusion.rf_loss(model, x0, {"labels": labels}, eps=eps, t=t)

        return grad_check(f, probes, max_coords=coords, rng=rng)


# -- individual properties ----------------------------------------------------------


def check_primitive_grads() -> str:
    missing = sorted(set(ops.OPS) - set(primitive_cases()))
    _require(not missing, f"ops without a gradient case: {missing}")
    errors = primitive_grad_errors()
    worst = max(errors, key=errors.get)
    _require(errors[worst] <= GRAD_TOL, f"{worst}: relative error {errors[worst]:.2e} > {GRAD_TOL}")
    return f"{len(errors)} ops, worst {worst} {errors[worst]:.1e}"


def check_model_grad() -> str:
    err = model_grad_error()
    _require(err <= GRAD_TOL, f"end-to-end relative error {err:.2e} > {GRAD_TOL}")
    return f"worst {err:.1e}"


def _attn_weights(c, heads, rng):
    w = asa.AttentionWeights(c, heads, ParamFactory(rng))
    randomize(w, rng, 0.3)
    return w


def check_asa_full() -> str:
    with precision("wide"):
        rng = np.random.default_rng(1)
        w, cw = _attn_weights(16, 4, rng), _attn_weights(16, 4, rng)
        x, ctx = rng.standard_normal((2, 12, 16)), rng.standard_normal((2, 3, 16))
        with no_grad():
            got = asa.attend(Tensor(x), w, asa.FULL).data
            got_x, got_c = (t.data for t in asa.attend(Tensor(x), w, asa.FULL, Tensor(ctx), cw))
        ref = asa.reference_attention(x, w)
        ref_x, ref_c = asa.reference_attention(x, w, ctx, cw)
    err = max(np.abs(got - ref).max(), np.abs(got_x - ref_x).max(), np.abs(got_c - ref_c).max())
    _require(err <= ATTN_TOL, f"full attention differs from reference by {err:.2e}")
    return f"max diff {err:.1e}"


def random_patterns(count: int, seed: int = 0):
    """``(L, s, n, heads, context_len)`` draws with ``L`` divisible by ``s*n``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        s, n = int(rng.integers(1, 5)), int(rng.choice([1, 2, 4]))
        length = s * n * int(rng.integers(1, 5))
        out.append((length, s, n, int(rng.choice([1, 2, 4])), int(rng.integers(0, 3))))
    return out


def check_asa_regions(count: int = 50) -> str:
    worst = 0.0
    with precision("wide"):
        for k, (length, s, n, heads, t_len) in enumerate(random_patterns(count)):
            rng = np.random.default_rng([2, k])
            w, cw = _attn_weights(8, heads, rng), _attn_weights(8, heads, rng)
            pattern = asa.AsaPattern(s, n)
            x = rng.standard_normal((2, length, 8))
            with no_grad():
                if t_len:
                    ctx = rng.standard_normal((2, t_len, 8))
                    gx, gc = (t.data for t in asa.attend(Tensor(x), w, pattern, Tensor(ctx), cw))
                    rx, rc = asa.per_region_reference(x, w, pattern, ctx, cw)
                    err = max(np.abs(gx - rx).max(), np.abs(gc - rc).max())
                else:
                    err = np.abs(asa.attend(Tensor(x), w, pattern).data - asa.per_region_reference(x, w, pattern)).max()
            worst = max(worst, float(err))
            _require(err <= ATTN_TOL, f"L={length} s={s} n={n} heads={heads} T={t_len}: diff {err:.2e}")
    return f"{count} configs, max diff {worst:.1e}"


def check_divide_roundtrip() -> str:
    rng = np.random.default_rng(3)
    for length, s, n, _, _ in random_patterns(30, seed=3):
        x = Tensor(rng.standard_normal((3, length, 5)), dtype=np.float64)
        p = asa.AsaPattern(s, n)
        back = asa.undivide(asa.divide(x, p), p, 3)
        _require(np.array_equal(back.data, x.data), f"divide/undivide not exact for L={length} s={s} n={n}")
    return "30 patterns bit-exact"


def check_asa_connectivity() -> str:
    alt = asa.AsaSchedule.from_pairs([(4, 1), (4, 4)])
    same = asa.AsaSchedule.from_pairs([(4, 1), (4, 1)])
    for length in (16, 32, 64):
        _require(asa.connected_components(asa.interaction_graph(alt, length, 2)) == 1,
                 f"[(4,1),(4,4)] is not connected at L={length}")
        _require(asa.connected_components(asa.interaction_graph(same, length, 2)) > 1,
                 f"[(4,1),(4,1)] is unexpectedly connected at L={length}")
    return "alternating connected, repeated not"


def check_modulation() -> str:
    rng = np.random.default_rng(4)
    c, blocks = 8, 24
    g = condmod.GlobalModulation(Tensor(rng.standard_normal((2, 6 * c))))
    init = ParamFactory(rng)
    affine = condmod.BlockAffine(c, init, affine=True)
    single = condmod.BlockAffine(c, init, affine=False)
    beta = rng.standard_normal(6 * c)
    affine.beta.data[:] = beta
    single.beta.data[:] = beta
    with no_grad():
        a = condmod.block_modulation(g, affine).data
        b = condmod.block_modulation(g, single).data
    _require(np.array_equal(a, b), "gamma=0 does not reproduce S_hat + beta exactly")
    zeroed = [condmod.BlockAffine(c, init) for _ in range(blocks)]
    with no_grad():
        outs = [condmod.block_modulation(g, z).data for z in zeroed]
    _require(all(np.array_equal(o, g.s_hat.data) for o in outs), "gamma=beta=0 blocks do not share S_hat")
    from ..config import two_branch

    full = two_branch()
    diff = analyzer.count_params(full).total - analyzer.count_params(full.replace(modulation_mode="adaln_single")).total
    _require(diff == full.depth * 6 * full.width, f"affine overhead {diff} != blocks*6C")
    return f"affine overhead {diff} scalars"


def check_checkpoint_roundtrip() -> str:
    rng = np.random.default_rng(5)
    entries = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b/c": rng.standard_normal(5),
        "i": np.arange(6, dtype=np.int64).reshape(2, 3),
        "u": np.frombuffer(b'{"k": 1}', dtype=np.uint8),
    }
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.emdt"
        checkpoint.save(path, entries)
        back = checkpoint.load(path)
    _require(set(back) == set(entries), "checkpoint names changed")
    for k, v in entries.items():
        _require(back[k].dtype == v.dtype and np.array_equal(back[k], v), f"entry {k} changed")
    cfg = grad_micro_config()
    _require(ModelConfig.from_dict(cfg.to_dict()) == cfg, "config dict round-trip changed the config")
    return f"{len(entries)} entries bit-exact"


def check_oracle_sampler() -> str:
    with precision("wide"):
        rng = np.random.default_rng(6)
        x0, eps = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 2, 4, 4))
        _require(np.array_equal(diffusion.forward_process(x0, eps, np.zeros(3)), x0), "x_0 endpoint not exact")
        _require(np.array_equal(diffusion.forward_process(x0, eps, np.ones(3)), eps), "x_1 endpoint not exact")

        def oracle(x, t, cond):
            return eps - x0

        worst = 0.0
        for steps in (1, 20):
            out = diffusion.sample(oracle, x0.shape, cfg=diffusion.SamplerConfig(steps=steps), noise=eps)
            worst = max(worst, float(np.abs(out - x0).max()))
        _require(worst <= 1e-12, f"oracle sampler misses x0 by {worst:.2e}")
    return f"max error {worst:.1e}"


def check_analyzer_live() -> str:
    cfg = ModelConfig()
    params, macs = analyzer.live_counts(cfg)
    report = analyzer.count_flops(cfg)
    _require(params == report.param_count, f"closed-form params {report.param_count} != live {params}")
    _require(macs == report.mac_count, f"closed-form MACs {report.mac_count} != instrumented {macs}")
    return f"{params} params, {macs} MACs"


CHECKS: dict[str, Callable[[], str]] = {
    "primitive_gradients": check_primitive_grads,
    "model_gradient": check_model_grad,
    "asa_full_attention": check_asa_full,
    "asa_region_oracle": check_asa_regions,
    "asa_divide_roundtrip": check_divide_roundtrip,
    "asa_connectivity": check_asa_connectivity,
    "modulation_degeneracies": check_modulation,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
    "oracle_sampler": check_oracle_sampler,
    "analyzer_live_counts": check_analyzer_live,
}


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def run_checks(names=None, stop_on_failure: bool = True, report: Callable[[CheckResult], None] | None = None):
    results = []
    for name in names or CHECKS:
        start = time.perf_counter()
        try:
            detail, ok = CHECKS[name](), True
        except CheckFailure as exc:
            detail, ok = str(exc), False
        res = CheckResult(name, ok, detail, time.perf_counter() - start)
        results.append(res)
        if report is not None:
            report(res)
        if not ok and stop_on_failure:
            break
    return results
