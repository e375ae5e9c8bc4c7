import math

import numpy as np
import pytest

from emmdit import condmod
from emmdit.errors import ConfigError, ShapeError
from emmdit.numcore.layers import ParamFactory
from emmdit.numcore.tensor import Tensor, no_grad, precision
from emmdit.tokenpath import TokenGrid


def test_timestep_frequencies_match_formula():
    with precision("wide"):
        emb = condmod.timestep_frequencies([0.0, 0.25], dim=8)
    assert emb.shape == (2, 8)
    freqs = np.exp(-math.log(10000) * np.arange(4) / 4)
    np.testing.assert_allclose(emb[1, :4], np.cos(250 * freqs))
    np.testing.assert_allclose(emb[1, 4:], np.sin(250 * freqs))
    assert (emb[0, :4] == 1).all() and (emb[0, 4:] == 0).all()
    with pytest.raises(ValueError):
        condmod.timestep_frequencies([np.nan])


def test_positional_table_layout():
    table = condmod.PositionalTable.build(3, 4, 8)
    assert table.pe.shape == (12, 8)
    # row half depends only on the row, column half only on the column
    pe = table.pe.reshape(3, 4, 8)
    assert np.allclose(pe[:, :1, :4], pe[:, :, :4])
    assert np.allclose(pe[:1, :, 4:], pe[:, :, 4:])
    np.testing.assert_allclose(pe[0, 0], [0, 0, 1, 1, 0, 0, 1, 1])
    with pytest.raises(ConfigError):
        condmod.PositionalTable.build(2, 2, 6)


def test_apply_pe_checks_geometry():
    table = condmod.PositionalTable.build(2, 2, 4)
    g = TokenGrid(Tensor(np.zeros((1, 4, 4))), 2, 2)
    assert np.allclose(condmod.apply_pe(g, table).tokens.data[0], table.pe)
    with pytest.raises(ShapeError):
        condmod.apply_pe(TokenGrid(Tensor(np.zeros((1, 4, 8))), 2, 2), table)


def test_fresh_affine_is_identity(rng):
    s = condmod.GlobalModulation(Tensor(rng.standard_normal((2, 24))))
    for affine in (True, False):
        a = condmod.BlockAffine(4, ParamFactory(rng), affine=affine)
        assert np.array_equal(condmod.block_modulation(s, a).data, s.s_hat.data)


def test_affine_formula(rng):
    with precision("wide"):
        s = condmod.GlobalModulation(Tensor(rng.standard_normal((2, 24))))
        a = condmod.BlockAffine(4, ParamFactory(rng))
        a.gamma.data[:] = rng.standard_normal(24)
        a.beta.data[:] = rng.standard_normal(24)
        out = condmod.block_modulation(s, a).data
    np.testing.assert_allclose(out, s.s_hat.data * (1 + a.gamma.data) + a.beta.data)


def test_width_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        condmod.block_modulation(condmod.GlobalModulation(Tensor(np.zeros((1, 24)))),
                                 condmod.BlockAffine(8, ParamFactory(rng)))


def test_chunks_and_modulate(rng):
    s = Tensor(np.arange(12, dtype=np.float32).reshape(1, 12))
    chunks = condmod.modulation_chunks(s)
    assert len(chunks) == 6 and chunks[5].shape == (1, 1, 2)
    assert chunks[1].data.ravel().tolist() == [2, 3]
    x = Tensor(np.ones((1, 3, 2)))
    out = condmod.modulate(x, Tensor(np.full((1, 1, 2), 0.5)), Tensor(np.full((1, 1, 2), 1.0)))
    assert np.allclose(out.data, 2.5)


def test_zero_modulator_gives_zero_modulation(rng):
    init = ParamFactory(rng)
    with no_grad():
        g, c = condmod.timestep_embed(np.array([0.3]), condmod.TimestepEmbedder(8, init, 16),
                                      condmod.GlobalModulator(8, init, zero=True))
    assert g.s_hat.shape == (1, 48) and not g.s_hat.data.any()
    assert c.shape == (1, 8)
