"""Cross-backend equivalence and adjointness of the hot kernels."""

import numpy as np
import pytest

from coarseseg.backend import get_kernels

NB = get_kernels("numba")
NP = get_kernels("numpy")

RTOL = {np.float32: 2e-5, np.float64: 1e-12}


def _rng():
    return np.random.default_rng(1234)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape,k", [((3, 7, 9, 4), 3), ((2, 5, 5, 1), 3), ((2, 4, 4, 6), 1)])
def test_im2col_matches_across_backends(dtype, shape, k):
    x = _rng().standard_normal(shape).astype(dtype)
    a = NB.im2col(x, k)
    b = NP.im2col(x, k)
    assert a.shape == b.shape
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_col2im_is_adjoint_of_im2col(dtype):
    # <im2col(x), c> == <x, col2im(c)> defines the exact backward operator
    rng = _rng()
    x = rng.standard_normal((2, 6, 5, 3)).astype(dtype)
    cols = NB.im2col(x, 3)
    c = rng.standard_normal(cols.shape).astype(dtype)
    lhs = float(np.sum(cols.astype(np.float64) * c.astype(np.float64)))
    for K in (NB, NP):
        back = K.col2im(c, 3, 3)
        rhs = float(np.sum(x.astype(np.float64) * back.astype(np.float64)))
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("hw", [(6, 8), (7, 7), (5, 9), (1, 4)])
def test_maxpool_matches_and_routes_gradient(dtype, hw):
    rng = _rng()
    x = rng.standard_normal((3, *hw, 5)).astype(dtype)
    ya, ia = NB.maxpool2(x)
    yb, ib = NP.maxpool2(x)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(ia, ib)
    gy = rng.standard_normal(ya.shape).astype(dtype)
    ga = NB.maxpool2_backward(gy, ia, *hw)
    gb = NP.maxpool2_backward(gy, ib, *hw)
    np.testing.assert_array_equal(ga, gb)
    # every pooled gradient lands exactly once
    assert np.isclose(ga.sum(dtype=np.float64), gy.sum(dtype=np.float64), rtol=1e-5)


def test_maxpool_picks_maximum():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    y, idx = NB.maxpool2(x)
    np.testing.assert_array_equal(y[0, :, :, 0], [[5, 7], [13, 15]])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("src,dst", [((3, 3), (7, 7)), ((4, 5), (8, 10)), ((2, 2), (5, 9)), ((4, 4), (4, 4))])
def test_resize_nearest_matches_and_adjoint(dtype, src, dst):
    rng = _rng()
    x = rng.standard_normal((2, *src, 3)).astype(dtype)
    ya = NB.resize_nearest(x, *dst)
    yb = NP.resize_nearest(x, *dst)
    np.testing.assert_array_equal(ya, yb)
    gy = rng.standard_normal(ya.shape).astype(dtype)
    ga = NB.resize_nearest_backward(gy, *src)
    gb = NP.resize_nearest_backward(gy, *src)
    np.testing.assert_allclose(ga, gb, rtol=RTOL[dtype], atol=1e-6)
    lhs = float(np.sum(ya.astype(np.float64) * gy.astype(np.float64)))
    rhs = float(np.sum(x.astype(np.float64) * ga.astype(np.float64)))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_and_backward_match(dtype):
    rng = _rng()
    x = (rng.standard_normal((200, 5)) * 4).astype(dtype)
    ya, yb = NB.softmax_last(x), NP.softmax_last(x)
    np.testing.assert_allclose(ya, yb, rtol=RTOL[dtype], atol=1e-7)
    np.testing.assert_allclose(ya.sum(axis=1), 1.0, atol=1e-5)
    gy = rng.standard_normal(ya.shape).astype(dtype)
    np.testing.assert_allclose(
        NB.softmax_last_backward(ya, gy), NP.softmax_last_backward(yb, gy),
        rtol=RTOL[dtype], atol=1e-6,
    )


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("L", [2, 3, 11])
def test_colsoftmax_matches_and_is_column_stochastic(dtype, L):
    rng = _rng()
    z = (rng.standard_normal((50, L, L)) * 3).astype(dtype)
    aa = NB.colsoftmax_bias(z, 4.0)
    ab = NP.colsoftmax_bias(z, 4.0)
    np.testing.assert_allclose(aa, ab, rtol=RTOL[dtype], atol=1e-7)
    np.testing.assert_allclose(aa.sum(axis=1), 1.0, atol=1e-5)
    ga = rng.standard_normal(aa.shape).astype(dtype)
    np.testing.assert_allclose(
        NB.colsoftmax_backward(aa, ga), NP.colsoftmax_backward(ab, ga),
        rtol=RTOL[dtype], atol=1e-6,
    )


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("L", [2, 3, 11])
def test_cm_apply_matches_brute_force(dtype, L):
    rng = _rng()
    a = rng.random((40, L, L)).astype(dtype)
    p = rng.random((40, L)).astype(dtype)
    want = np.empty_like(p)
    for n in range(40):
        for i in range(L):
            want[n, i] = sum(a[n, i, j] * p[n, j] for j in range(L))
    for K in (NB, NP):
        np.testing.assert_allclose(K.cm_apply(a, p), want, rtol=RTOL[dtype], atol=1e-6)
    gy = rng.standard_normal((40, L)).astype(dtype)
    ga_a, gp_a = NB.cm_apply_backward(a, p, gy)
    ga_b, gp_b = NP.cm_apply_backward(a, p, gy)
    np.testing.assert_allclose(ga_a, ga_b, rtol=RTOL[dtype], atol=1e-6)
    np.testing.assert_allclose(gp_a, gp_b, rtol=RTOL[dtype], atol=1e-6)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_nll_sums_and_backward_match(dtype):
    rng = _rng()
    B, P, L = 4, 60, 3
    y = rng.random((B, P, L)).astype(dtype) + 1e-3
    t = rng.integers(0, L, (B, P)).astype(np.uint8)
    t[rng.random((B, P)) < 0.3] = 255
    sa, ca = NB.nll_sums(y, t, 1e-12)
    sb, cb = NP.nll_sums(y, t, 1e-12)
    np.testing.assert_array_equal(ca, cb)
    np.testing.assert_allclose(sa, sb, rtol=1e-12)
    # brute force
    for b in range(B):
        want = sum(-np.log(max(float(y[b, p, t[b, p]]), 1e-12))
                   for p in range(P) if t[b, p] != 255)
        assert np.isclose(sa[b], want, rtol=1e-10)
    coef = rng.random(B)
    g1 = np.zeros_like(y)
    g2 = np.zeros_like(y)
    NB.nll_backward_into(y, t, coef, 1e-12, g1)
    NP.nll_backward_into(y, t, coef, 1e-12, g2)
    np.testing.assert_allclose(g1, g2, rtol=RTOL[dtype], atol=1e-6)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_trace_kernels_match(dtype):
    rng = _rng()
    a = rng.random((3, 30, 4, 4)).astype(dtype)
    np.testing.assert_allclose(NB.trace_sums(a), NP.trace_sums(a), rtol=1e-12)
    coef = rng.random(3)
    g1 = np.zeros_like(a)
    g2 = np.zeros_like(a)
    NB.trace_backward_into(g1, coef)
    NP.trace_backward_into(g2, coef)
    np.testing.assert_allclose(g1, g2, rtol=RTOL[dtype], atol=1e-7)
    offdiag = g1.copy()
    offdiag[:, :, np.arange(4), np.arange(4)] = 0
    assert not offdiag.any()
