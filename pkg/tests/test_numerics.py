import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monovl import numerics as nx
from monovl.exceptions import DimensionError, ProbeError


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), b).data, b)


def test_matmul_projector():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(nx.matmul(a, b).data, [[5, 6], [0, 0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31))
def test_mm_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    np.testing.assert_allclose(nx.mm(a, b), triple_loop(a, b), rtol=1e-12, atol=1e-12)


def test_mm_thread_count_independent():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((300, 70)), rng.standard_normal((70, 33))
    before = nx.get_num_threads()
    try:
        nx.set_num_threads(1)
        one = nx.mm(a, b)
        nx.set_num_threads(before)
        many = nx.mm(a, b)
    finally:
        nx.set_num_threads(before)
    assert np.array_equal(one, many)


def test_rmsnorm_unit_row():
    out = nx.rmsnorm(np.ones((1, 5)), np.ones(5), eps=1e-12).data
    np.testing.assert_allclose(out, np.ones((1, 5)), rtol=1e-10)


def test_rmsnorm_zero_row():
    assert np.array_equal(nx.rmsnorm(np.zeros((1, 4)), np.ones(4), 1e-6).data, np.zeros((1, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31))
def test_rmsnorm_oracle(n, d, seed):
    rng = np.random.default_rng(seed)
    x, g = rng.standard_normal((n, d)), rng.standard_normal(d)
    want = np.empty_like(x)
    for i in range(n):
        ms = sum(v * v for v in x[i]) / d
        want[i] = x[i] / np.sqrt(ms + 1e-6) * g
    np.testing.assert_allclose(nx.rmsnorm(x, g, 1e-6).data, want, rtol=1e-12, atol=1e-14)


def test_softmax_symmetric():
    np.testing.assert_allclose(nx.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])


def test_softmax_stable():
    out = nx.softmax_rows(np.array([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 9), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(n, m, seed):
    x = np.random.default_rng(seed).standard_normal((n, m)) * 30
    out = nx.softmax_rows(x).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(out >= 0)


def test_causal_attention_matches_dense_oracle():
    rng = np.random.default_rng(3)
    n, h, hd = 37, 2, 4
    qkv = rng.standard_normal((n, 3 * h * hd))
    out = nx.causal_attention(qkv, h, 1 / np.sqrt(hd), chunk=8).data
    q, k, v = np.split(qkv, 3, axis=1)
    want = np.zeros((n, h * hd))
    for head in range(h):
        sl = slice(head * hd, (head + 1) * hd)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
        s[np.triu_indices(n, 1)] = -np.inf
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        want[:, sl] = p @ v[:, sl]
    np.testing.assert_allclose(out, want, rtol=1e-11, atol=1e-13)


def test_grad_check_quadratic():
    x = nx.Parameter(np.array([1.0, 2.0, 3.0]), name="x")
    nx.total(nx.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    rep = nx.grad_check(lambda: nx.total(nx.mul(x, x)), [x], tol=1e-8)
    assert rep.passed and rep.max_rel_err < 1e-8


def test_grad_check_constant():
    x = nx.Parameter(np.array([1.0, -2.0]), name="x")
    rep = nx.grad_check(lambda: nx.add(nx.total(nx.constant(np.ones(3))), nx.scale(nx.total(x), 0.0)), [x])
    assert np.all(np.abs(x.grad) <= 1e-9)
    assert rep.passed


def test_grad_check_probe_error():
    x = nx.Parameter(np.array([0.0]), name="x")

    def f():
        if x.data[0] != 0.0:
            return nx.constant(np.array(np.inf))
        return nx.total(x)

    with pytest.raises(ProbeError):
        nx.grad_check(f, [x])


@pytest.mark.parametrize("seed", range(100))
def test_grad_check_ops_random(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    x = nx.Parameter(rng.standard_normal((n, d)), name="x")
    w = nx.Parameter(rng.standard_normal((d, 2 * d)), name="w")
    g = nx.Parameter(rng.standard_normal(2 * d), name="g")
    t = nx.Parameter(rng.standard_normal((7, 2 * d)), name="t")
    ids = rng.integers(0, 7, size=n)
    targets = rng.integers(0, 2 * d, size=n)
    weights = rng.integers(0, 2, size=n).astype(float)
    weights[0] = 1.0

    def f():
        h = nx.rmsnorm(nx.add(nx.matmul(x, w), nx.embedding(t, ids)), g)
        h = nx.silu(h)
        return nx.weighted_nll(nx.softmax_rows(h), targets, weights)

    assert nx.grad_check(f, [x, w, g, t]).passed
