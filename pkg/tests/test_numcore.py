import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from emmdit.errors import CheckpointError, NumericalError, ShapeError
from emmdit.harness.checks import primitive_cases
from emmdit.numcore import checkpoint, ops
from emmdit.numcore.gradcheck import grad_check
from emmdit.numcore.layers import MLP, Linear, ParamFactory
from emmdit.numcore.tensor import Parameter, Tensor, count_macs, default_dtype, no_grad, precision


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_primitive_gradients_wide(name):
    with precision("wide"):
        f, inputs = primitive_cases()[name](np.random.default_rng(7))
        assert grad_check(f, inputs) <= 1e-4


def test_every_registered_op_has_a_case():
    assert set(ops.OPS) == set(primitive_cases())


def test_precision_selects_dtype():
    assert Tensor([1.0]).dtype == np.float32
    with precision("wide"):
        assert default_dtype() is np.float64
        assert Tensor([1.0]).dtype == np.float64
    assert default_dtype() is np.float32
    with pytest.raises(ValueError):
        with precision("half"):
            pass


def test_forward_matches_numpy(rng):
    with precision("wide"):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, a @ b)
        x = rng.standard_normal((3, 7))
        e = np.exp(x - x.max(axis=1, keepdims=True))
        np.testing.assert_allclose(ops.softmax(Tensor(x)).data, e / e.sum(axis=1, keepdims=True))
        ln = ops.layer_norm(Tensor(x), eps=0.0).data
        np.testing.assert_allclose(ln.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(ln.std(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(ops.silu(Tensor(x)).data, x / (1 + np.exp(-x)))
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, rtol=1e-12)


def test_broadcast_gradients_reduce_to_input_shape(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    ops.sum_(ops.mul(a, b)).backward()
    assert b.grad.shape == (1, 4)
    np.testing.assert_allclose(b.grad[0], a.data.sum(axis=0), rtol=1e-5)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    ops.sum_(ops.add(ops.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_shape_errors():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_non_finite_output_raises():
    with np.errstate(divide="ignore"), pytest.raises(NumericalError):
        ops.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_mac_counter_counts_matmul_and_linear(rng):
    x = Tensor(rng.standard_normal((2, 5, 4)))
    lin = Linear(4, 6, ParamFactory(rng))
    with count_macs() as c:
        y = lin(x)
        ops.matmul(Tensor(np.ones((3, 2, 7))), Tensor(np.ones((3, 7, 5))))
    assert c.by_op["linear"] == 2 * 5 * 4 * 6
    assert c.by_op["matmul"] == 3 * 2 * 7 * 5
    assert y.shape == (2, 5, 6)


def test_mlp_parameter_count(rng):
    mlp = MLP(8, 16, 4, ParamFactory(rng))
    assert mlp.num_parameters() == 8 * 16 + 16 + 16 * 4 + 4


def test_lazy_factory_is_zero():
    lin = Linear(3, 5, ParamFactory(None))
    assert not lin.weight.data.any()


def test_state_dict_roundtrip_and_strictness(rng):
    a, b = MLP(3, 4, 2, ParamFactory(rng)), MLP(3, 4, 2, ParamFactory(np.random.default_rng(9)))
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"fc1.weight": a.fc1.weight.data})


arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=4), elements=st.floats(-1e3, 1e3, width=32)),
    hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4), elements=st.floats(-1e6, 1e6)),
    hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=5), elements=st.integers(-10 ** 9, 10 ** 9)),
    hnp.arrays(np.uint8, hnp.array_shapes(max_dims=1, max_side=16)),
)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), arrays, min_size=1, max_size=4))
def test_checkpoint_roundtrip_property(entries):
    back = checkpoint.decode(checkpoint.encode(entries))
    assert set(back) == set(entries)
    for k, v in entries.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert np.array_equal(back[k], v)


def test_checkpoint_rejects_corruption(tmp_path):
    blob = checkpoint.encode({"w": np.arange(6, dtype=np.float32)})
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob + b"\0")
    path = tmp_path / "w.emdt"
    checkpoint.save(path, {"w": np.ones(2)})
    assert np.array_equal(checkpoint.load(path)["w"], np.ones(2))
    assert list(tmp_path.iterdir()) == [path]  # no temp files left behind


def test_parameter_requires_grad_by_default():
    assert Parameter(np.ones(2)).requires_grad
