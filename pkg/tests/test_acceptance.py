"""Acceptance gate: one test per criterion, each printing a single pass/fail line."""

import tempfile
import time
from fractions import Fraction

import numpy as np
import pytest

from emmdit import analyzer, asa, condmod, config, diffusion
from emmdit.harness import ablation, checks
from emmdit.harness.train import Experiment, eval_batches, evaluate, init_state, train
from emmdit.model import build_model
from emmdit.numcore.layers import ParamFactory
from emmdit.numcore.tensor import Tensor, no_grad, precision


def rel(a, b):
    return abs(a - b) / abs(b)


def test_ac01_parameter_reproduction(report_criterion):
    start = time.perf_counter()
    dit, tb = config.dit_l2(), config.two_branch()
    p_dit, p_tb = analyzer.count_params(dit).total, analyzer.count_params(tb).total
    live_dit = build_model(dit, materialize=False).num_parameters()
    live_tb = build_model(tb, materialize=False).num_parameters()
    elapsed = time.perf_counter() - start
    ok = (
        rel(p_dit / 1e6, 458) <= 0.01
        and rel(p_tb / 1e6, 343) <= 0.02
        and p_dit == live_dit
        and p_tb == live_tb
        and elapsed < 5
    )
    report_criterion(
        "AC1 parameter reproduction",
        ok,
        f"DiT-L/2 {p_dit / 1e6:.2f}M (458 +-1%), two-branch {p_tb / 1e6:.2f}M (343 +-2%), "
        f"live counts equal: {p_dit == live_dit and p_tb == live_tb}, {elapsed:.2f}s (< 5s)",
    )


def test_ac02_flops_reproduction(report_criterion):
    start = time.perf_counter()
    f_dit = analyzer.count_flops(config.dit_l2(), (16, 16))
    f_tb = analyzer.count_flops(config.two_branch(), (16, 16))
    elapsed = time.perf_counter() - start
    convention = all(r.flop_count == 2 * r.mac_count for r in f_dit.rows + f_tb.rows)
    ok = rel(f_dit.gflops, 161.42) <= 0.02 and rel(f_tb.gflops, 89.77) <= 0.05 and convention and elapsed < 5
    report_criterion(
        "AC2 FLOPs reproduction",
        ok,
        f"DiT-L/2 {f_dit.gflops:.2f}G (161.42 +-2%), two-branch {f_tb.gflops:.2f}G (89.77 +-5%), "
        f"2 FLOPs/MAC on every row: {convention}, {elapsed:.2f}s (< 5s)",
    )


def test_ac03_attention_cost_ratios(report_criterion):
    def attn(pairs):
        cfg = config.dit_l2().replace(asa_schedule=asa.AsaSchedule.from_pairs(pairs))
        return analyzer.count_flops(cfg).attention_flops

    base = attn([(1, 1)])
    r1 = Fraction(attn([(1, 1), (4, 1), (4, 4)]), base)
    r2 = Fraction(attn([(4, 1), (4, 4)]), base)
    ok = r1 == Fraction(1, 2) and r2 == Fraction(1, 4)
    report_criterion(
        "AC3 attention-cost ratios",
        ok,
        f"1 : {r1} : {r2} (expected 1 : 1/2 : 1/4; published 12.9 : 6.4 : 3.2, absolutes not asserted)",
    )


def test_ac04_token_reduction(report_criterion):
    budget = analyzer.token_budget(config.two_branch(), (16, 16))
    pct = 100 * budget.mid_reduction
    ok = budget.stage_tokens == [256, 80, 256] and budget.mid_reduction == 0.6875 and abs(pct - 68.5) <= 0.5
    report_criterion(
        "AC4 token-reduction arithmetic",
        ok,
        f"stages {budget.stage_tokens}, mid-stage reduction {pct:.2f}% (published 68.5%, within rounding)",
    )


def test_ac05_asa_correctness(report_criterion):
    start = time.perf_counter()
    parts = {}
    for key, fn in (
        ("a", checks.check_asa_full),
        ("b", lambda: checks.check_asa_regions(50)),
        ("c", checks.check_divide_roundtrip),
        ("d", checks.check_asa_connectivity),
    ):
        try:
            parts[key] = (True, fn())
        except checks.CheckFailure as exc:
            parts[key] = (False, str(exc))
    elapsed = time.perf_counter() - start
    ok = all(v[0] for v in parts.values()) and elapsed < 60
    detail = "; ".join(f"({k}) {v[1]}" for k, v in parts.items())
    report_criterion("AC5 ASA correctness", ok, f"{detail}; {elapsed:.1f}s (< 60s)")


def test_ac06_modulation_degeneracies(report_criterion):
    rng = np.random.default_rng(0)
    cfg = config.ModelConfig(width=32, head_count=2, block_groups=(4, 16, 4), ffn_multiplier=2,
                             asa_schedule=asa.AsaSchedule.full(), name="mod24")
    model = build_model(cfg, seed=0)
    with no_grad():
        gmod, cond = condmod.timestep_embed(np.array([0.2, 0.7]), model.t_embed, model.global_mod)
    gmod = condmod.GlobalModulation(Tensor(rng.standard_normal(gmod.s_hat.shape)))
    with no_grad():
        shared = all(np.array_equal(b.image.modulation(gmod, cond).data, gmod.s_hat.data) for b in model.blocks)
        affine = condmod.BlockAffine(32, ParamFactory(rng))
        single = condmod.BlockAffine(32, ParamFactory(rng), affine=False)
        beta = rng.standard_normal(6 * 32).astype(gmod.s_hat.dtype)
        affine.beta.data[:] = beta
        single.beta.data[:] = beta
        gamma_zero = np.array_equal(condmod.block_modulation(gmod, affine).data,
                                    condmod.block_modulation(gmod, single).data)
        expected = gmod.s_hat.data + beta
        gamma_zero = gamma_zero and np.array_equal(condmod.block_modulation(gmod, single).data, expected)
    full = config.two_branch()
    overhead = analyzer.count_params(full).total - analyzer.count_params(
        full.replace(modulation_mode="adaln_single")).total
    live = (build_model(full, materialize=False).num_parameters()
            - build_model(full.replace(modulation_mode="adaln_single"), materialize=False).num_parameters())
    want = full.depth * 6 * full.width
    ok = gamma_zero and shared and len(model.blocks) == 24 and overhead == live == want
    report_criterion(
        "AC6 modulation degeneracies",
        ok,
        f"gamma=0 equals S_hat+beta: {gamma_zero}; gamma=beta=0 shared by all {len(model.blocks)} blocks: {shared}; "
        f"affine overhead {overhead} == 24*6*1024 = {want}",
    )


def test_ac07_differentiability(report_criterion):
    start = time.perf_counter()
    errors = checks.primitive_grad_errors()
    missing = sorted(set(checks.ops.OPS) - set(errors))
    worst = max(errors, key=errors.get)
    model_err = checks.model_grad_error(coords=10)
    elapsed = time.perf_counter() - start
    ok = not missing and errors[worst] <= 1e-4 and model_err <= 1e-4 and elapsed < 180
    report_criterion(
        "AC7 differentiability",
        ok,
        f"{len(errors)} primitives (worst {worst} {errors[worst]:.1e}), end-to-end micro {model_err:.1e} "
        f"(<= 1e-4, wide mode), {elapsed:.1f}s (< 180s)",
    )


def test_ac08_rectified_flow_exactness(report_criterion):
    with precision("wide"):
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal((4, 3, 8, 8))
        eps = rng.standard_normal(x0.shape)
        ends = (np.array_equal(diffusion.forward_process(x0, eps, np.zeros(4)), x0)
                and np.array_equal(diffusion.forward_process(x0, eps, np.ones(4)), eps))
        oracle = lambda x, t, cond: eps - x0  # noqa: E731
        out1 = diffusion.sample(oracle, x0.shape, cfg=diffusion.SamplerConfig(steps=1), noise=eps)
        out20 = diffusion.sample(oracle, x0.shape, cfg=diffusion.SamplerConfig(steps=20), noise=eps)
    e1, e20 = np.abs(out1 - x0).max(), np.abs(out20 - x0).max()
    ok = ends and e1 <= 1e-12 and e20 <= 1e-12 and np.abs(out1 - out20).max() <= 1e-12
    report_criterion(
        "AC8 rectified-flow exactness",
        ok,
        f"endpoints exact: {ends}; oracle Euler error 1 step {e1:.1e}, 20 steps {e20:.1e} (<= 1e-12)",
    )


@pytest.mark.slow
def test_ac09_training_smoke(report_criterion):
    start = time.perf_counter()
    exp = Experiment()  # micro config, 500 steps, batch 32
    batches = eval_batches(exp)
    with precision("standard"):
        before = evaluate(init_state(exp).model, batches)
    result = train(exp)
    with precision("standard"):
        after = evaluate(result.state.model, batches)
    train_secs = time.perf_counter() - start
    ratio = after / before

    repeat = train(exp.replace_train(steps=20))
    deterministic = repeat.losses == result.losses[:20]

    resume_exp = exp.replace_train(steps=20, batch_size=8, precision="wide")
    straight = train(resume_exp).losses
    with tempfile.TemporaryDirectory() as d:
        first = train(resume_exp.replace_train(steps=10), out_dir=d)
        resumed = train(resume_exp, resume=f"{d}/final.emdt")
    bit_exact = first.losses + resumed.losses == straight
    elapsed = time.perf_counter() - start
    ok = ratio <= 0.7 and deterministic and bit_exact and len(result.losses) == 500 and elapsed <= 600
    report_criterion(
        "AC9 training smoke test",
        ok,
        f"eval rf_loss {before:.4f} -> {after:.4f} after 500 steps (ratio {ratio:.3f} <= 0.7), "
        f"seed-deterministic: {deterministic}, wide-mode resume bit-exact over 10 steps: {bit_exact}, "
        f"training {train_secs:.0f}s, total {elapsed:.0f}s (<= 600s, this host has {_cores()} core(s))",
    )


def _cores():
    import os

    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()


def test_ac10_ablation_coverage(report_criterion):
    results = ablation.run_all()
    rows = [r for rs in results.values() for r in rs]
    records = [rec for t in results for rec in ablation.to_records(results[t])]
    bad = [f"{r.row.table}/{r.row.label}" for r in rows if not r.ok]
    fid_flagged = all(rec["FID_IS"] == ablation.NOT_REPRODUCED for rec in records)
    ordering = [r.row.label for r in sorted(results["ds"], key=lambda r: r.flops_g) if r.row.label != "w/o skip"]
    ds_order = ordering == ["4x only", "Stacked 2x", "2x only", "Two-branch", "DiT L/2"]
    blks_min = min(results["blks"], key=lambda r: r.flops_g).row.label == "(0, 24, 0)"
    adaln_343 = all(abs(r.params_m - 343) / 343 <= 0.02 for r in results["adaln"][1:])
    ok = len(rows) >= 20 and not bad and fid_flagged and ds_order and blks_min and adaln_343
    report_criterion(
        "AC10 ablation coverage",
        ok,
        f"{len(rows)} rows over tables {sorted(results)}; out of tolerance: {bad or 'none'}; "
        f"FID/IS reported as not reproduced: {fid_flagged}; ds FLOPs ordering matches: {ds_order}; "
        f"(0,24,0) cheapest: {blks_min}; both modulation rows ~343M: {adaln_343}",
    )
