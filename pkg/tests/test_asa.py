import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emmdit import asa
from emmdit.errors import ConfigError, ShapeError
from emmdit.numcore.layers import ParamFactory
from emmdit.numcore.tensor import Tensor, no_grad, precision


@st.composite
def pattern_and_length(draw):
    s = draw(st.integers(1, 5))
    n = draw(st.integers(1, 4))
    l = draw(st.integers(1, 4))
    return asa.AsaPattern(s, n), l * s * n


@settings(max_examples=80, deadline=None)
@given(pattern_and_length(), st.integers(1, 3), st.integers(1, 3))
def test_divide_undivide_roundtrip(pl, batch, c):
    pattern, length = pl
    x = np.arange(batch * length * c, dtype=np.float64).reshape(batch, length, c)
    with precision("wide"):
        y = asa.divide(Tensor(x), pattern)
        assert y.shape == (batch * pattern.region_num, length // pattern.region_num, c)
        assert np.array_equal(asa.undivide(y, pattern, batch).data, x)


@settings(max_examples=40, deadline=None)
@given(pattern_and_length())
def test_divide_groups_positions_by_region_formula(pl):
    pattern, length = pl
    pos = np.arange(length, dtype=np.float64).reshape(1, length, 1)
    with precision("wide"):
        regions = asa.divide(Tensor(pos), pattern).data[..., 0]
    expected = pattern.region_of(length)
    for j, row in enumerate(regions):
        assert (expected[row.astype(int)] == j).all()
        assert (np.diff(row) > 0).all()  # order within a region is preserved


def test_region_formula_small_case():
    assert asa.AsaPattern(2, 2).region_of(8).tolist() == [0, 0, 1, 1, 0, 0, 1, 1]
    assert asa.AsaPattern(4, 1).region_of(4).tolist() == [0, 1, 2, 3]


def test_indivisible_length_names_the_numbers():
    with pytest.raises(ConfigError, match=r"L=10.*s=4, n=1"):
        asa.AsaPattern(4, 1).check(10)
    with pytest.raises(ConfigError):
        asa.AsaPattern(0, 1)


def test_undivide_rejects_wrong_batch():
    with pytest.raises(ShapeError):
        asa.undivide(Tensor(np.zeros((6, 2, 3))), asa.AsaPattern(4, 1), 2)


def _weights(rng, width=8, heads=2):
    w = asa.AttentionWeights(width, heads, ParamFactory(rng))
    for _, p in w.named_parameters():
        p.data[:] = rng.standard_normal(p.shape) * 0.3
    return w


def test_full_attention_matches_reference(rng):
    with precision("wide"):
        w = _weights(rng)
        x = rng.standard_normal((2, 12, 8))
        with no_grad():
            out = asa.attend(Tensor(x), w).data
        np.testing.assert_allclose(out, asa.reference_attention(x, w), atol=1e-12)


@pytest.mark.parametrize("pair", [(2, 1), (2, 3), (3, 2), (6, 1), (1, 4)])
def test_region_attention_matches_per_region_reference(rng, pair):
    with precision("wide"):
        w, cw = _weights(rng), _weights(rng)
        pattern = asa.AsaPattern(*pair)
        x, ctx = rng.standard_normal((2, 12, 8)), rng.standard_normal((2, 3, 8))
        with no_grad():
            out = asa.attend(Tensor(x), w, pattern).data
            xo, co = asa.attend(Tensor(x), w, pattern, Tensor(ctx), cw)
        np.testing.assert_allclose(out, asa.per_region_reference(x, w, pattern), atol=1e-12)
        rx, rc = asa.per_region_reference(x, w, pattern, ctx, cw)
        np.testing.assert_allclose(xo.data, rx, atol=1e-12)
        np.testing.assert_allclose(co.data, rc, atol=1e-12)


def test_probabilities_have_region_shape(rng):
    w = _weights(rng)
    _, probs = asa.attend(Tensor(rng.standard_normal((1, 8, 8))), w, asa.AsaPattern(4, 1), return_probs=True)
    assert probs.shape == (4, 2, 2, 2)
    np.testing.assert_allclose(probs.data.sum(-1), 1, rtol=1e-5)


def test_attend_shape_errors(rng):
    w = _weights(rng)
    with pytest.raises(ShapeError):
        asa.attend(Tensor(np.zeros((1, 4, 6))), w)
    with pytest.raises(ShapeError):
        asa.attend(Tensor(np.zeros((1, 4, 8))), w, context=Tensor(np.zeros((2, 1, 8))))


def test_schedule_cycles_and_roundtrips():
    sched = asa.AsaSchedule.from_pairs([(1, 1), (4, 1), (4, 4)])
    assert [str(sched.pattern_for(i)) for i in range(4)] == ["1:1", "4:1", "4:4", "1:1"]
    assert asa.AsaSchedule.from_pairs(sched.to_pairs()) == sched
    with pytest.raises(ConfigError):
        asa.AsaSchedule(())


def test_cycle_connects_every_token():
    sched = asa.AsaSchedule.from_pairs([(4, 1), (4, 4)])
    adj = asa.interaction_graph(sched, 64, 2)
    assert asa.connected_components(adj) == 1
    assert asa.reachability(adj).all()
    # a single sparse pattern splits the sequence into its regions
    alone = asa.interaction_graph(asa.AsaSchedule.from_pairs([(4, 1)]), 64, 1)
    assert asa.connected_components(alone) == 4
