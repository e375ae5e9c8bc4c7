import json
from fractions import Fraction

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from emmdit import analyzer, config
from emmdit.asa import AsaSchedule
from emmdit.errors import ConfigError
from emmdit.model import build_model


@st.composite
def small_configs(draw):
    heads = draw(st.sampled_from([1, 2, 4]))
    width = heads * draw(st.sampled_from([4, 8]))
    compression = draw(st.sampled_from(["none", "two_branch", "2x", "4x", "stacked_2x"]))
    n2 = draw(st.integers(1, 4)) if compression != "stacked_2x" else 4
    dual = draw(st.booleans())
    return config.ModelConfig(
        width=width,
        head_count=heads,
        block_groups=(draw(st.integers(0, 2)), n2, draw(st.integers(0, 2))),
        ffn_multiplier=draw(st.integers(1, 4)),
        asa_schedule=AsaSchedule.full(),
        compression=compression,
        use_skip=draw(st.booleans()),
        position_reinforcement=draw(st.sampled_from(config.PR_MODES)),
        modulation_mode=draw(st.sampled_from(config.MODULATION_MODES)),
        variant="mmdit_dual_stream" if dual else "dit_single_stream",
        patch_size=draw(st.sampled_from([1, 2])),
        in_channels=draw(st.integers(1, 4)),
        image_size=(8, 8) if draw(st.booleans()) else (16, 16),
        num_classes=draw(st.integers(1, 5)),
        name="fuzz",
    )


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(small_configs())
def test_param_count_matches_built_model(cfg):
    assert analyzer.count_params(cfg).total == build_model(cfg, materialize=False).num_parameters()


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(small_configs())
def test_macs_match_instrumented_forward(cfg):
    params, macs = analyzer.live_counts(cfg)
    report = analyzer.count_flops(cfg)
    assert report.param_count == params
    assert report.mac_count == macs


def test_micro_live_counts():
    cfg = config.micro()
    assert analyzer.live_counts(cfg) == (analyzer.count_params(cfg).total, analyzer.count_flops(cfg).mac_count)


def test_published_scale_numbers():
    dit, tb = analyzer.count_flops(config.dit_l2()), analyzer.count_flops(config.two_branch())
    assert round(dit.mparams, 1) == 457.8 and round(dit.gflops, 1) == 161.4
    assert round(tb.mparams, 1) == 340.6 and round(tb.gflops, 1) == 89.7
    assert all(r.flop_count == 2 * r.mac_count for r in dit.rows)


def test_attention_ratios_are_exact():
    def attn(pairs):
        return analyzer.count_flops(config.dit_l2().replace(asa_schedule=AsaSchedule.from_pairs(pairs))).attention_flops

    base = attn([(1, 1)])
    assert Fraction(attn([(2, 1)]), base) == Fraction(1, 2)
    assert Fraction(attn([(4, 2)]), base) == Fraction(1, 4)
    assert Fraction(attn([(1, 1), (4, 1), (4, 4)]), base) == Fraction(1, 2)


@pytest.mark.parametrize(
    "cfg, grid, tokens, reduction",
    [
        (config.two_branch(), (16, 16), [256, 80, 256], 0.6875),
        (config.two_branch(), (8, 8), [64, 20, 64], 0.6875),
        (config.dit_l2(), (16, 16), [256, 256, 256], 0.0),
        (config.two_branch().replace(compression="4x"), (16, 16), [256, 16, 256], 0.9375),
        (config.two_branch().replace(compression="stacked_2x"), (16, 16), [256, 64, 16, 64, 256], None),
    ],
)
def test_token_budget(cfg, grid, tokens, reduction):
    budget = analyzer.token_budget(cfg, grid)
    assert budget.stage_tokens == tokens
    assert budget.token_blocks == sum(n * t for _, n, t in budget.stages)
    if reduction is not None:
        assert budget.mid_reduction == reduction


def test_token_budget_rejects_bad_grid():
    with pytest.raises(ConfigError):
        analyzer.token_budget(config.two_branch(), (6, 6))


def test_costs_grow_with_depth_and_width():
    base = config.two_branch()
    f0 = analyzer.count_flops(base).flop_count
    assert analyzer.count_flops(base.replace(block_groups=(4, 17, 4))).flop_count > f0
    assert analyzer.count_flops(base.replace(width=1152)).flop_count > f0
    assert analyzer.count_flops(base, (32, 32)).flop_count > f0


def test_adaln_overhead():
    tb = config.two_branch()
    single = tb.replace(modulation_mode="adaln_single")
    assert analyzer.adaln_overhead(tb) == 24 * 12 * 1024
    assert analyzer.adaln_overhead(single) == 24 * 6 * 1024
    # gamma is the only difference between the two variants
    assert analyzer.count_params(tb).total - analyzer.count_params(single).total == 24 * 6 * 1024


def test_reports_render():
    text = analyzer.analyze(config.dit_l2())
    assert "161.39" in text and "457.82" in text
    data = json.loads(analyzer.analyze(config.two_branch(), as_json=True))
    assert data["totals"]["mac_count"] * 2 == data["totals"]["flop_count"]
    assert data["totals"]["param_count"] == analyzer.count_params(config.two_branch()).total
    assert data["tokens"]["mid_reduction"] == 0.6875
