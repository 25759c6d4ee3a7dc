import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusedlm import numcore as nc
from fusedlm.numcore import Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_grad(build, leaves, tol=1e-6):
    """``build()`` returns a scalar Tensor built from ``leaves``."""
    for t in leaves:
        t.zero_grad()
    out = build()
    out.backward()
    for t in leaves:
        num = numeric_grad(lambda: build().item(), t.data)
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


# ---------------------------------------------------------------- forward oracles


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    want = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nc.matmul(Tensor(a), Tensor(b)).data, want, rtol=1e-12, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(nc.ShapeError):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_matches_mpmath(rng):
    mpmath.mp.dps = 40
    for _ in range(20):
        x = rng.normal(scale=5.0, size=7)
        exps = [mpmath.exp(mpmath.mpf(float(v))) for v in x]
        z = mpmath.fsum(exps)
        want = np.array([float(e / z) for e in exps])
        np.testing.assert_allclose(nc.softmax(Tensor(x)).data, want, rtol=1e-13, atol=1e-15)


def test_log_softmax_is_logsumexp_shift(rng):
    x = rng.normal(scale=30.0, size=(4, 9))
    lse = np.log(np.sum(np.exp(x - x.max(-1, keepdims=True)), -1, keepdims=True)) + x.max(-1, keepdims=True)
    np.testing.assert_allclose(nc.log_softmax(Tensor(x)).data, x - lse, atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    x = np.array([1000.0, -1000.0, 0.0])
    p = nc.softmax(Tensor(x)).data
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


def test_softmax_rejects_nan():
    with pytest.raises(nc.NumericError):
        nc.softmax(Tensor(np.array([0.0, np.nan])))


def test_cross_entropy_uniform_is_log_v():
    logits = Tensor(np.zeros((5, 99)))
    assert nc.cross_entropy(logits, np.arange(5)).item() == pytest.approx(math.log(99), abs=1e-12)


def test_cross_entropy_mask_and_errors(rng):
    x = rng.normal(size=(4, 6))
    tgt = np.array([1, 2, 99, 0])  # masked row holds an invalid target
    mask = np.array([1, 1, 0, 1], dtype=bool)
    got = nc.cross_entropy(Tensor(x), tgt, mask).item()
    logp = x - np.log(np.exp(x).sum(-1, keepdims=True))
    want = -(logp[0, 1] + logp[1, 2] + logp[3, 0]) / 3
    assert got == pytest.approx(want, abs=1e-12)
    with pytest.raises(nc.EmptyLossError):
        nc.cross_entropy(Tensor(x), tgt, np.zeros(4, dtype=bool))
    with pytest.raises(IndexError):
        nc.cross_entropy(Tensor(x), tgt)


def test_attention_matches_loop(rng):
    q, k, v = (rng.normal(size=(1, 2, 4, 3)) for _ in range(3))
    got = nc.causal_self_attention(Tensor(q), Tensor(k), Tensor(v)).data
    want = np.zeros_like(got)
    for h in range(2):
        for t in range(4):
            s = np.array([q[0, h, t] @ k[0, h, j] / math.sqrt(3) for j in range(t + 1)])
            w = np.exp(s - s.max())
            w /= w.sum()
            want[0, h, t] = sum(w[j] * v[0, h, j] for j in range(t + 1))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_rmsnorm_formula(rng):
    x, w = rng.normal(size=(3, 5)), rng.normal(size=5)
    want = x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6) * w
    np.testing.assert_allclose(nc.rmsnorm(Tensor(x), Tensor(w)).data, want, atol=1e-12)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nc.embedding_lookup(Tensor(np.zeros((4, 2))), np.array([1, 4]))


# ---------------------------------------------------------------- gradients


def test_grad_elementwise_and_reductions(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))
    check_grad(lambda: nc.sum(nc.mul(nc.relu(nc.add(a, b)), a)), [a, b])
    c = leaf(rng.normal(size=(2, 3, 4)))
    check_grad(lambda: nc.mean(nc.scale(nc.sum(c, axis=1, keepdims=True), 1.7)), [c])


def test_grad_shape_ops(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    w = rng.normal(size=(3, 2, 2))
    check_grad(lambda: nc.sum(nc.mul(nc.transpose(nc.reshape(nc.stack([a, b], 0), (2, 2, 3)), (2, 0, 1)), Tensor(w))), [a, b])
    check_grad(lambda: nc.sum(nc.mul(nc.concat([a, b], -1), nc.concat([b, a], -1))), [a, b])


def test_grad_gather_rows_duplicates(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    bi, pi = np.array([0, 1, 0]), np.array([2, 0, 2])
    w = Tensor(rng.normal(size=(3, 4)))
    check_grad(lambda: nc.sum(nc.mul(nc.gather_rows(a, bi, pi), w)), [a])


def test_grad_matmul_batched(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    check_grad(lambda: nc.sum(nc.mul(nc.matmul(a, b), nc.matmul(a, b))), [a, b])


def test_grad_rmsnorm_attention_embedding(rng):
    x, w = leaf(rng.normal(size=(2, 5))), leaf(rng.normal(size=5))
    r = Tensor(rng.normal(size=(2, 5)))
    check_grad(lambda: nc.sum(nc.mul(nc.rmsnorm(x, w), r)), [x, w])
    q, k, v = (leaf(rng.normal(size=(1, 2, 3, 2))) for _ in range(3))
    r2 = Tensor(rng.normal(size=(1, 2, 3, 2)))
    check_grad(lambda: nc.sum(nc.mul(nc.causal_self_attention(q, k, v), r2)), [q, k, v])
    table = leaf(rng.normal(size=(5, 3)))
    r3 = Tensor(rng.normal(size=(1, 3, 3)))
    check_grad(lambda: nc.sum(nc.mul(nc.embedding_lookup(table, np.array([[1, 1, 4]])), r3)), [table])


def test_grad_softmax_and_cross_entropy(rng):
    x = leaf(rng.normal(size=(3, 5)))
    r = Tensor(rng.normal(size=(3, 5)))
    check_grad(lambda: nc.sum(nc.mul(nc.softmax(x), r)), [x])
    check_grad(lambda: nc.sum(nc.mul(nc.log_softmax(x), r)), [x])
    check_grad(lambda: nc.cross_entropy(x, np.array([0, 4, 2]), np.array([1, 0, 1])), [x])


# ---------------------------------------------------------------- graph semantics


def test_backward_twice_raises():
    a = leaf([1.0, 2.0])
    out = nc.sum(nc.mul(a, a))
    out.backward()
    with pytest.raises(nc.GraphError):
        out.backward()


def test_backward_requires_scalar():
    a = leaf([1.0, 2.0])
    with pytest.raises(nc.GraphError):
        nc.mul(a, a).backward()


def test_gradients_accumulate_across_passes():
    a = leaf([3.0])
    nc.sum(nc.mul(a, a)).backward()
    nc.sum(nc.mul(a, a)).backward()
    assert a.grad[0] == pytest.approx(12.0)


def test_no_grad_builds_no_graph():
    a = leaf([1.0])
    with nc.no_grad():
        out = nc.sum(nc.mul(a, a))
        assert not nc.grad_enabled()
    assert nc.grad_enabled()
    assert not out.requires_grad
    assert out._parents == ()


def test_frozen_leaf_gets_no_buffer():
    a, b = leaf([1.0, 2.0]), Tensor(np.array([3.0, 4.0]))
    nc.sum(nc.mul(a, b)).backward()
    assert b.grad is None and a.grad is not None


def test_interior_grads_cleared_unless_retained():
    a = leaf([1.0, 2.0])
    mid = nc.mul(a, a)
    kept = nc.scale(mid, 2.0).retain_grad()
    nc.sum(kept).backward()
    assert mid.grad is None
    np.testing.assert_array_equal(kept.grad, [1.0, 1.0])


# ---------------------------------------------------------------- properties

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=st.floats(-50, 50))


@settings(max_examples=200, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(x, c):
    p = nc.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nc.softmax(Tensor(x + c)).data, p, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(finite_rows)
def test_log_softmax_exp_is_softmax(x):
    np.testing.assert_allclose(np.exp(nc.log_softmax(Tensor(x)).data), nc.softmax(Tensor(x)).data, atol=1e-12)
