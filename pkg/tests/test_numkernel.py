import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from chunkalign import numkernel as nk
from chunkalign.errors import DegenerateInputError, DimensionError, OracleError
from chunkalign.numkernel import Tensor2D


def T(a, grad=False):
    return Tensor2D(np.asarray(a, dtype=np.float64), requires_grad=grad)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def mats(rows=st.integers(1, 5), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(lambda rc: arrays(np.float64, rc, elements=finite))


# --- matmul


def test_matmul_identity():
    out = nk.matmul(T(np.eye(2)), T([[3, 4], [5, 6]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert nk.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    b = T(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    x = T(rng.standard_normal((3, 4)))
    assert nk.grad_check(lambda v: nk.sum_all(nk.mul(nk.matmul(v, b), T(w))), x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associative(n, m, p, q, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (T(rng.standard_normal(s)) for s in ((n, m), (m, p), (p, q)))
    left = nk.matmul(nk.matmul(a, b), c).data
    right = nk.matmul(a, nk.matmul(b, c)).data
    assert np.max(np.abs(left - right)) < 1e-9


# --- softmax


def test_softmax_zero_row_is_uniform():
    assert np.allclose(nk.softmax_rows(T(np.zeros((1, 4)))).data, 0.25, atol=0, rtol=1e-15)


def test_softmax_large_equal_logits_no_overflow():
    out = nk.softmax_rows(T([[1000.0, 1000.0]])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, 0.5)


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 5))
    assert nk.grad_check(lambda v: nk.sum_all(nk.mul(nk.softmax_rows(v), T(w))), T(rng.standard_normal((2, 5)))) < 1e-6


@settings(max_examples=50, deadline=None)
@given(mats())
def test_softmax_rows_on_simplex(a):
    out = nk.softmax_rows(T(a * 50)).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=1) - 1)) < 1e-12


# --- layer norm


def test_layer_norm_constant_row_is_zero():
    out = nk.layer_norm(T([[2.0, 2.0, 2.0]]), T(np.ones((1, 3))), T(np.zeros((1, 3))))
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_two_point_standardization():
    out = nk.layer_norm(T([[1.0, 3.0]]), T(np.ones((1, 2))), T(np.zeros((1, 2))), eps=1e-15)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_length_mismatch():
    with pytest.raises(DimensionError):
        nk.layer_norm(T(np.ones((2, 3))), T(np.ones((1, 2))), T(np.zeros((1, 3))))


@pytest.mark.parametrize("which", ["x", "gain", "bias"])
def test_layer_norm_gradients(which):
    rng = np.random.default_rng(3)
    x, g, b = T(rng.standard_normal((4, 8))), T(rng.standard_normal((1, 8))), T(rng.standard_normal((1, 8)))
    w = T(rng.standard_normal((4, 8)))
    target = {"x": x, "gain": g, "bias": b}[which]
    assert nk.grad_check(lambda _: nk.sum_all(nk.mul(nk.layer_norm(x, g, b), w)), target) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite))
def test_layer_norm_rows_standardized(a):
    a = a + np.arange(6)  # keep rows away from zero variance
    out = nk.layer_norm(T(a), T(np.ones((1, 6))), T(np.zeros((1, 6))), eps=1e-12).data
    assert np.allclose(out.mean(axis=1), 0, atol=1e-9)
    assert np.allclose(out.var(axis=1), 1, atol=1e-6)


# --- gelu


def test_gelu_zero_and_asymptote():
    assert nk.gelu(T([[0.0]])).data[0, 0] == 0.0
    assert abs(nk.gelu(T([[10.0]])).data[0, 0] - 10.0) < 1e-4


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)[None, :]
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(nk.gelu(T(x)).data, ref, atol=1e-15)


def test_gelu_monotone_on_positive_range():
    x = np.linspace(-0.75, 6, 200)[None, :]
    assert np.all(np.diff(nk.gelu(T(x)).data[0]) > 0)


def test_gelu_gradient():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((2, 6))
    assert nk.grad_check(lambda v: nk.sum_all(nk.mul(nk.gelu(v), T(w))), T(2 * rng.standard_normal((2, 6)))) < 1e-6


# --- l2 normalize


def test_l2_normalize_three_four_five():
    assert np.allclose(nk.l2_normalize_rows(T([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_unit_vector_fixed():
    v = np.array([[0.0, 1.0, 0.0]])
    assert np.array_equal(nk.l2_normalize_rows(T(v)).data, v)


def test_l2_normalize_zero_row_names_row():
    with pytest.raises(DegenerateInputError, match="row 1"):
        nk.l2_normalize_rows(T([[1.0, 0.0], [0.0, 0.0]]))


def test_l2_normalize_random_norms():
    out = nk.l2_normalize_rows(T(np.random.default_rng(5).standard_normal((5, 8)))).data
    assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite))
def test_l2_normalize_idempotent(a):
    a = a + 20.0  # no zero rows
    once = nk.l2_normalize_rows(T(a)).data
    twice = nk.l2_normalize_rows(T(once)).data
    assert np.max(np.abs(once - twice)) < 1e-12


# --- mean rows


def test_mean_rows_singleton_and_midpoint():
    x = T([[1.0, 1.0], [3.0, 3.0]])
    assert np.array_equal(nk.mean_rows(x, 1, 2).data, [[3.0, 3.0]])
    assert np.array_equal(nk.mean_rows(x, 0, 2).data, [[2.0, 2.0]])


def test_mean_rows_full_range_matches_column_sums():
    a = np.random.default_rng(6).standard_normal((7, 3))
    manual = [sum(a[i, j] for i in range(7)) / 7 for j in range(3)]
    assert np.allclose(nk.mean_rows(T(a), 0, 7).data[0], manual, atol=1e-15)


@pytest.mark.parametrize("s,e", [(2, 2), (3, 1), (-1, 2), (0, 9)])
def test_mean_rows_bad_slice(s, e):
    with pytest.raises((DegenerateInputError, DimensionError)):
        nk.mean_rows(T(np.ones((4, 2))), s, e)


# --- grad_check itself


def test_grad_check_linear_map():
    x = T(np.random.default_rng(7).standard_normal((3, 3)))
    assert nk.grad_check(nk.sum_all, x) < 1e-10


def test_grad_check_squared_norm():
    x = T(np.random.default_rng(8).standard_normal((2, 4)))
    assert nk.grad_check(lambda v: nk.sum_all(nk.mul(v, v)), x) < 1e-8
    x.requires_grad, x.grad = True, None
    with nk.Tape() as tape:
        out = nk.sum_all(nk.mul(x, x))
    tape.backward(out)
    assert np.allclose(x.grad, 2 * x.data)


def test_grad_check_nonfinite_raises():
    x = T([[1.0, 2.0]])
    with pytest.raises(OracleError):
        nk.grad_check(lambda v: nk.sum_all(nk.scale(v, float("inf"))), x)


def test_grad_check_restores_input():
    a = np.random.default_rng(9).standard_normal((2, 3))
    x = T(a.copy())
    nk.grad_check(lambda v: nk.sum_all(nk.gelu(v)), x)
    assert np.array_equal(x.data, a)


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        nk.grad_check(nk.sum_all, T([[1.0]]), step=0)


def test_corrupted_rule_is_detected():
    x = T(np.random.default_rng(10).standard_normal((2, 3)))
    with nk.corrupt_gradient("gelu"):
        assert nk.grad_check(lambda v: nk.sum_all(nk.gelu(v)), x) > 1e-3
    assert nk.grad_check(lambda v: nk.sum_all(nk.gelu(v)), x) < 1e-6


# --- structural ops and tape behaviour


def test_gather_rows_accumulates_repeated_ids():
    table = T(np.arange(6.0).reshape(3, 2), grad=True)
    with nk.Tape() as tape:
        out = nk.sum_all(nk.gather_rows(table, [0, 0, 2]))
    tape.backward(out)
    assert np.array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_masked_fill_blocks_gradient():
    x = T(np.ones((2, 2)), grad=True)
    mask = np.array([[True, False], [False, True]])
    with nk.Tape() as tape:
        out = nk.sum_all(nk.masked_fill(x, mask))
    tape.backward(out)
    assert np.array_equal(x.grad, (~mask).astype(float))


def test_concat_and_slice_round_trip():
    a, b = T(np.ones((2, 2))), T(np.zeros((2, 3)))
    cat = nk.concat_cols([a, b])
    assert cat.shape == (2, 5)
    assert np.array_equal(nk.slice_cols(cat, 2, 5).data, b.data)
    assert nk.concat_rows([a, a]).shape == (4, 2)


def test_no_tape_records_nothing():
    x = T(np.ones((1, 2)), grad=True)
    with nk.Tape() as tape:
        with nk.no_tape():
            y = nk.scale(x, 2.0)
    assert not y.requires_grad and len(tape) == 0


@settings(max_examples=30, deadline=None)
@given(mats())
def test_ops_stay_finite(a):
    x = T(a)
    for out in (nk.gelu(x), nk.softmax_rows(x), nk.layer_norm(x, T(np.ones((1, a.shape[1]))), T(np.zeros((1, a.shape[1]))))):
        assert np.all(np.isfinite(out.data))


def test_tensor_shapes():
    assert Tensor2D(np.ones(3)).shape == (1, 3)
    with pytest.raises(DimensionError):
        Tensor2D(np.ones((2, 2, 2)))
