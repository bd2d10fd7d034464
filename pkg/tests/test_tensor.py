import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distillock import tensor as T


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


perms = st.integers(1, 12).flatmap(lambda n: st.permutations(list(range(n))).map(np.array))


def test_matmul_matches_triple_loop(rng):
    for _ in range(20):
        a = rng.standard_normal((rng.integers(1, 6), rng.integers(1, 6)))
        b = rng.standard_normal((a.shape[1], rng.integers(1, 6)))
        # Same summation order, so the match is exact.
        assert np.array_equal(T.matmul(a, b), loop_matmul(a, b))


def test_matmul_batches_broadcast(rng):
    a = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal((5, 2))
    out = T.matmul(a, b)
    for i in range(3):
        assert np.array_equal(out[i], T.matmul(a[i], b))


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_records_flops():
    with T.count_flops() as c:
        T.matmul(np.ones((2, 3, 4)), np.ones((4, 5)))
    assert c.by_kind["matmul"] == 2 * 2 * 3 * 4 * 5


def test_no_counting_outside_context():
    T.record("matmul", 10)  # must be a no-op
    with T.count_flops() as c:
        pass
    assert c.total == 0


@given(perms)
def test_apply_cols_is_right_multiplication(p):
    x = np.random.default_rng(len(p)).standard_normal((3, len(p)))
    assert np.array_equal(T.apply_cols(x, p), x @ T.dense_perm(p))


@given(perms)
def test_apply_rows_is_transpose_left_multiplication(p):
    x = np.random.default_rng(len(p)).standard_normal((len(p), 2))
    assert np.array_equal(T.apply_rows(x, p), T.dense_perm(p).T @ x)


@given(perms)
def test_invert_perm(p):
    inv = T.invert_perm(p)
    assert np.array_equal(p[inv], np.arange(len(p)))
    assert np.array_equal(T.dense_perm(inv), T.dense_perm(p).T)


@given(perms.flatmap(lambda p: st.permutations(list(range(len(p)))).map(lambda q: (p, np.array(q)))))
def test_compose_perm_matches_matrix_product(pq):
    p, q = pq
    assert np.array_equal(T.dense_perm(T.compose_perm(p, q)), T.dense_perm(p) @ T.dense_perm(q))
    x = np.arange(len(p), dtype=float)[None]
    assert np.array_equal(T.apply_cols(T.apply_cols(x, p), q), T.apply_cols(x, T.compose_perm(p, q)))


def test_check_perm_rejects():
    with pytest.raises(ValueError):
        T.check_perm([0, 0, 1])
    with pytest.raises(ValueError):
        T.check_perm([0.0, 1.0])
    with pytest.raises(T.ShapeError):
        T.apply_cols(np.ones((2, 3)), [1, 0])


def test_softmax_known_value():
    out = T.softmax_rows(np.array([[math.log(1.0), math.log(3.0)]]))
    np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-15)


def test_softmax_temperature_and_stability():
    x = np.array([1000.0, 1001.0, -1e6])
    out = T.softmax_rows(x)
    assert np.isfinite(out).all() and abs(out.sum() - 1) < 1e-15
    np.testing.assert_allclose(T.softmax_rows(x, 2.0), T.softmax_rows(x / 2.0))
    with pytest.raises(ValueError):
        T.softmax_rows(x, 0.0)


def test_log_softmax_agrees(rng):
    x = rng.standard_normal((4, 7)) * 5
    np.testing.assert_allclose(np.exp(T.log_softmax_rows(x, 1.5)), T.softmax_rows(x, 1.5), rtol=1e-13)


def test_silu_known_value():
    assert T.silu(np.array([1.0]))[0] == pytest.approx(0.7310585786300049, rel=1e-15)
    assert T.silu(np.array([0.0]))[0] == 0.0
    big = T.silu(np.array([-800.0, 800.0]))
    assert np.isfinite(big).all() and big[1] == 800.0


def test_layernorm_known_value():
    out = T.layernorm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), eps=0.0)
    np.testing.assert_allclose(out, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-15)


def test_rmsnorm_known_value():
    out = T.rmsnorm(np.array([3.0, 4.0]), np.ones(2), eps=0.0)
    np.testing.assert_allclose(out, [0.848528137423857, 1.131370849898476], rtol=1e-15)


def test_norm_parameter_shape_checked():
    with pytest.raises(T.ShapeError):
        T.layernorm(np.ones((2, 3)), np.ones(2), np.zeros(3))


@given(perms.filter(lambda p: len(p) >= 2), st.integers(0, 2**32 - 1))
def test_layernorm_equivariance(p, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, len(p))) * 4
    g, b = r.standard_normal(len(p)), r.standard_normal(len(p))
    lhs = T.layernorm(T.apply_cols(x, p), T.apply_cols(g, p), T.apply_cols(b, p))
    assert np.max(np.abs(lhs - T.apply_cols(T.layernorm(x, g, b), p))) <= 1e-12


@given(perms, st.integers(0, 2**32 - 1))
def test_rmsnorm_equivariance(p, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, len(p))) * 4
    g = r.standard_normal(len(p))
    lhs = T.rmsnorm(T.apply_cols(x, p), T.apply_cols(g, p))
    assert np.max(np.abs(lhs - T.apply_cols(T.rmsnorm(x, g), p))) <= 1e-12


def test_gather_sum_matches_dense(rng):
    table = rng.standard_normal((10, 4))
    idx = np.array([7, 2, 2])
    val = np.array([1.0, 2.0, -0.5])
    dense = np.zeros(10)
    np.add.at(dense, idx, val)
    np.testing.assert_allclose(T.gather_sum(table, idx, val), dense @ table, rtol=1e-14)
    with T.count_flops() as c:
        T.gather_sum(table, idx, val)
    assert c.by_kind["gather"] == 3 * 4


def test_gather_sum_rejects():
    with pytest.raises(IndexError):
        T.gather_sum(np.ones((3, 2)), [3], [1.0])
    with pytest.raises(T.ShapeError):
        T.gather_sum(np.ones((3, 2)), [0, 1], [1.0])


def test_elementwise_flop_kinds():
    a = np.ones((2, 3))
    with T.count_flops() as c:
        T.add(a, a)
        T.sub(a, a)
        T.mul(a, a)
        T.silu(a)
        T.softmax_rows(a)
        T.layernorm(a, np.ones(3), np.zeros(3))
    assert dict(c.by_kind) == {"add": 6, "sub": 6, "mul": 6, "silu": 6, "softmax": 30, "norm": 36}
