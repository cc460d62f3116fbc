# test_tensor_autodiff.py

import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.extra.numpy as nph
import hypothesis.strategies as st

from src import tensor_autodiff as ad
from src.errors import ContractError, ShapeError
from src.tensor_autodiff import Graph, Tensor, finite_diff_check


def leaf(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


# --- Forward values ---

def test_matmul_values():
    identity = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(identity, m).numpy(), m.numpy())
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).numpy().tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_gelu_values():
    out = ad.gelu(Tensor([0.0, 1.0, -10.0])).numpy()
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.841345, abs=1e-6)
    assert abs(out[2]) < 1e-8


def test_layernorm_values():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(ad.layernorm(Tensor([5.0, 5.0, 5.0]), ones, zeros).numpy(), 0.0)

    x = Tensor([1.0, -1.0])
    out = ad.layernorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).numpy()
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-9)
    out = ad.layernorm(x, Tensor([2.0, 2.0]), Tensor([3.0, 3.0]), eps=1e-12).numpy()
    np.testing.assert_allclose(out, [5.0, 1.0], atol=1e-9)


def test_layernorm_width_mismatch():
    with pytest.raises(ShapeError):
        ad.layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_softmax_values():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([0.0, 0.0])).numpy(), [0.5, 0.5])
    big = ad.softmax_rows(Tensor([1000.0, 1000.0])).numpy()
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax_rows(Tensor([0.0, math.log(3.0)])).numpy(), [0.25, 0.75])


@settings(deadline=None, max_examples=50)
@given(
    nph.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
               elements=st.floats(-50, 50, allow_nan=False)),
    st.floats(-100, 100, allow_nan=False),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    out = ad.softmax_rows(Tensor(x)).numpy()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax_rows(Tensor(x + shift)).numpy(), out, atol=1e-9)


def test_concat_last_axis():
    assert ad.concat_last_axis(Tensor([1.0, 2.0]), Tensor([3.0])).numpy().tolist() == [1.0, 2.0, 3.0]
    assert ad.concat_last_axis(Tensor(np.ones((4, 8))), Tensor(np.ones((4, 8)))).shape == (4, 16)
    with pytest.raises(ShapeError):
        ad.concat_last_axis(Tensor(np.ones((4, 8))), Tensor(np.ones((5, 8))))


def test_zero_dimension_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# --- Backward ---

def test_backward_linear_and_square():
    w = leaf([1.0, 2.0, 3.0])
    with Graph() as graph:
        graph.backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])

    w = leaf([1.0, 2.0])
    with Graph():
        ad.backward((w * w).sum())
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_leaf_used_twice_accumulates():
    w = leaf([1.0, -2.0])
    with Graph():
        ad.backward((w + w).sum())
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_backward_needs_scalar():
    w = leaf([1.0, 2.0])
    with Graph() as graph:
        with pytest.raises(ContractError):
            graph.backward(w * 2.0)


def test_backward_outside_graph_is_contract_error():
    with pytest.raises(ContractError):
        ad.backward(Tensor(1.0))


def test_frozen_leaf_gets_no_grad():
    frozen = Tensor([1.0, 2.0])
    w = leaf([3.0, 4.0])
    with Graph():
        ad.backward((frozen * w).sum())
    assert frozen.grad is None
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])


def test_ops_outside_graph_record_nothing():
    w = leaf([1.0])
    out = w * 3.0
    assert out._graph is None


# --- Finite differences ---

def test_finite_diff_sum_is_exact(rng):
    w = leaf(rng.normal(size=5))
    assert finite_diff_check(lambda: w.sum(), [w]) < 1e-10


def test_finite_diff_gelu_at_zero():
    w = leaf(np.zeros(4))
    assert finite_diff_check(lambda: ad.gelu(w).sum(), [w]) < 1e-6


def op_cases(rng):
    """One scalar function per registered op, over fresh random leaves."""
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    gamma = leaf(rng.normal(size=4))
    beta = leaf(rng.normal(size=4))
    wide = leaf(rng.normal(0.0, 3.0, size=(3, 5)))
    table = leaf(rng.normal(size=(6, 3)))
    labels = np.array([0, 2])
    targets = rng.integers(0, 2, size=(2, 5)).astype(np.float64)
    ids = np.array([[0, 2, 2], [5, 1, 0]])

    def shape_ops():
        rows = ad.take_rows(table, ids)  # [2 x 3 x 3]
        stacked = ad.concat_rows([ad.broadcast_to(ad.slice_axis(table, 0, 0, 1), (2, 1, 3)), rows])
        return (stacked.reshape(2, 12) * stacked.reshape(2, 12)).sum()

    return {
        "matmul": (lambda: ad.matmul(a, b).sum(), [a, b]),
        "gelu": (lambda: (ad.gelu(wide) * wide).sum(), [wide]),
        "layernorm": (lambda: (ad.layernorm(a, gamma, beta) * a).sum(), [a, gamma, beta]),
        "softmax": (lambda: (ad.softmax_rows(a) * a).sum(), [a]),
        "concat": (lambda: (ad.concat_last_axis(a, a * a) * ad.concat_last_axis(a, a)).sum(), [a]),
        "attention_like": (
            lambda: ad.matmul(ad.softmax_rows(ad.matmul(a, a.permute(0, 2, 1))), a).mean(), [a]
        ),
        "extremes": (lambda: ad.reduce_max(a, axis=-2).sum() + ad.reduce_min(a, axis=1).sum(), [a]),
        "losses": (
            lambda: ad.cross_entropy(ad.slice_axis(ad.matmul(a, b).mean(axis=1), -1, 0, 3), labels)
            + ad.bce_with_logits(ad.matmul(a, b).mean(axis=1), targets),
            [a, b],
        ),
        "shape_ops": (shape_ops, [table]),
    }


@pytest.mark.parametrize(
    "name",
    ["matmul", "gelu", "layernorm", "softmax", "concat", "attention_like", "extremes", "losses", "shape_ops"],
)
@settings(deadline=None, max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_finite_diff_per_op(name, seed):
    f, leaves = op_cases(np.random.default_rng(seed))[name]
    assert finite_diff_check(f, leaves) < 1e-4


@settings(deadline=None, max_examples=50)
@given(
    nph.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)),
               elements=st.floats(-0.4, 0.4, allow_nan=False)),
    st.floats(5.0, 100.0),
    st.floats(-1000.0, 1000.0),
)
def test_layernorm_moments(jitter, scale, offset):
    # Rows with std = scale, far above sqrt(eps).
    z = jitter + np.arange(jitter.shape[-1])
    z = (z - z.mean(axis=-1, keepdims=True)) / z.std(axis=-1, keepdims=True)
    x = offset + scale * z
    width = x.shape[-1]
    out = ad.layernorm(Tensor(x), Tensor(np.ones(width)), Tensor(np.zeros(width))).numpy()
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_finite_diff_rejects_bad_step():
    w = leaf([1.0])
    with pytest.raises(ContractError):
        finite_diff_check(lambda: w.sum(), [w], h=0.0)
