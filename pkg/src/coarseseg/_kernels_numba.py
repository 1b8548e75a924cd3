"""Numba @njit kernel implementations (default backend).

Semantics identical to `_kernels_numpy` (the tests cross-check the two
backends element-by-element). Kernels are single-threaded and write disjoint
output locations, so results are reproducible run to run. Loss-feeding
reductions accumulate in float64.
"""

from __future__ import annotations

import numpy as np
from numba import njit

IGNORE = 255


@njit(cache=True, fastmath=True)
def _im2col(x, k, cols):
    B, H, W, C = x.shape
    p = k // 2
    cols[:] = 0.0
    for b in range(B):
        for u in range(k):
            for v in range(k):
                off = (u * k + v) * C
                i0 = max(0, p - u)
                i1 = min(H, H + p - u)
                j0 = max(0, p - v)
                j1 = min(W, W + p - v)
                for i in range(i0, i1):
                    ii = i + u - p
                    for j in range(j0, j1):
                        jj = j + v - p
                        for c in range(C):
                            cols[b, i, j, off + c] = x[b, ii, jj, c]
    return cols


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,H,W,C] -> [B,H,W,k*k*C] patch matrix, zero-padded 'same', (u,v,c) order."""
    B, H, W, C = x.shape
    cols = np.empty((B, H, W, k * k * C), dtype=x.dtype)
    return _im2col(x, k, cols)


@njit(cache=True, fastmath=True)
def _col2im(cols, k, out):
    B, H, W, C = out.shape
    p = k // 2
    for b in range(B):
        for ii in range(H):
            for jj in range(W):
                for c in range(C):
                    out[b, ii, jj, c] = 0.0
    for b in range(B):
        for u in range(k):
            for v in range(k):
                off = (u * k + v) * C
                for i in range(H):
                    ii = i + u - p
                    if ii < 0 or ii >= H:
                        continue
                    for j in range(W):
                        jj = j + v - p
                        if 0 <= jj < W:
                            for c in range(C):
                                out[b, ii, jj, c] += cols[b, i, j, off + c]
    return out


def col2im(cols: np.ndarray, k: int, C: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to [B,H,W,C]."""
    B, H, W, _ = cols.shape
    out = np.empty((B, H, W, C), dtype=cols.dtype)
    return _col2im(cols, k, out)


@njit(cache=True, fastmath=True)
def _maxpool2(x, y, idx):
    B, H, W, C = x.shape
    Hc, Wc = y.shape[1], y.shape[2]
    for b in range(B):
        for i in range(Hc):
            for j in range(Wc):
                for c in range(C):
                    best = x[b, 2 * i, 2 * j, c]
                    pos = np.uint8(0)
                    for di in range(2):
                        ii = 2 * i + di
                        if ii >= H:
                            continue
                        for dj in range(2):
                            jj = 2 * j + dj
                            if jj >= W:
                                continue
                            v = x[b, ii, jj, c]
                            if v > best:
                                best = v
                                pos = np.uint8(di * 2 + dj)
                    y[b, i, j, c] = best
                    idx[b, i, j, c] = pos


def maxpool2(x: np.ndarray):
    """Ceil-mode 2x2/stride-2 max pool. Returns (y, idx) with idx in {0..3}."""
    B, H, W, C = x.shape
    Hc, Wc = (H + 1) // 2, (W + 1) // 2
    y = np.empty((B, Hc, Wc, C), dtype=x.dtype)
    idx = np.empty((B, Hc, Wc, C), dtype=np.uint8)
    _maxpool2(x, y, idx)
    return y, idx


@njit(cache=True, fastmath=True)
def _maxpool2_backward(gy, idx, gx):
    B, Hc, Wc, C = gy.shape
    H, W = gx.shape[1], gx.shape[2]
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    gx[b, i, j, c] = 0.0
    for b in range(B):
        for i in range(Hc):
            for j in range(Wc):
                for c in range(C):
                    pos = idx[b, i, j, c]
                    ii = 2 * i + pos // 2
                    jj = 2 * j + pos % 2
                    gx[b, ii, jj, c] = gy[b, i, j, c]


def maxpool2_backward(gy: np.ndarray, idx: np.ndarray, H: int, W: int) -> np.ndarray:
    """Route pooled gradients back to the argmax positions of the input."""
    B, Hc, Wc, C = gy.shape
    gx = np.empty((B, H, W, C), dtype=gy.dtype)
    _maxpool2_backward(gy, idx, gx)
    return gx


@njit(cache=True, fastmath=True)
def _resize_nearest(x, y):
    B, h, w, C = x.shape
    H, W = y.shape[1], y.shape[2]
    for b in range(B):
        for i in range(H):
            si = (i * h) // H
            for j in range(W):
                sj = (j * w) // W
                for c in range(C):
                    y[b, i, j, c] = x[b, si, sj, c]


def resize_nearest(x: np.ndarray, H: int, W: int) -> np.ndarray:
    """Nearest-neighbor resize [B,h,w,C] -> [B,H,W,C] (floor index map)."""
    B, h, w, C = x.shape
    y = np.empty((B, H, W, C), dtype=x.dtype)
    _resize_nearest(x, y)
    return y


@njit(cache=True, fastmath=True)
def _resize_nearest_backward(gy, gx):
    B, H, W, C = gy.shape
    h, w = gx.shape[1], gx.shape[2]
    for b in range(B):
        for i in range(h):
            for j in range(w):
                for c in range(C):
                    gx[b, i, j, c] = 0.0
    for b in range(B):
        for i in range(H):
            si = (i * h) // H
            for j in range(W):
                sj = (j * w) // W
                for c in range(C):
                    gx[b, si, sj, c] += gy[b, i, j, c]


def resize_nearest_backward(gy: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of resize_nearest: sum gradients over each source preimage."""
    B, H, W, C = gy.shape
    gx = np.empty((B, h, w, C), dtype=gy.dtype)
    _resize_nearest_backward(gy, gx)
    return gx


@njit(cache=True, fastmath=True)
def _softmax_last(x, y):
    N, K = x.shape
    for n in range(N):
        m = x[n, 0]
        for k in range(1, K):
            if x[n, k] > m:
                m = x[n, k]
        s = 0.0
        for k in range(K):
            e = np.exp(x[n, k] - m)
            y[n, k] = e
            s += e
        inv = 1.0 / s
        for k in range(K):
            y[n, k] *= inv


def softmax_last(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis of [N,K]."""
    y = np.empty_like(x)
    _softmax_last(x, y)
    return y


@njit(cache=True, fastmath=True)
def _softmax_last_backward(y, gy, gx):
    N, K = y.shape
    for n in range(N):
        dot = 0.0
        for k in range(K):
            dot += y[n, k] * gy[n, k]
        for k in range(K):
            gx[n, k] = y[n, k] * (gy[n, k] - dot)


def softmax_last_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    gx = np.empty_like(y)
    _softmax_last_backward(y, gy, gx)
    return gx


@njit(cache=True, fastmath=True)
def _colsoftmax_bias(z, gamma, a):
    N, L, _ = z.shape
    for n in range(N):
        for j in range(L):
            m = z[n, 0, j] + (gamma if j == 0 else 0.0)
            for i in range(1, L):
                v = z[n, i, j] + (gamma if i == j else 0.0)
                if v > m:
                    m = v
            s = 0.0
            for i in range(L):
                v = z[n, i, j] + (gamma if i == j else 0.0)
                e = np.exp(v - m)
                a[n, i, j] = e
                s += e
            inv = 1.0 / s
            for i in range(L):
                a[n, i, j] *= inv


def colsoftmax_bias(z: np.ndarray, gamma: float) -> np.ndarray:
    """Column softmax of [N,L,L] logits with +gamma added on the diagonal.

    Output column j (axis 1 runs over the noisy label i) sums to 1.
    """
    a = np.empty_like(z)
    _colsoftmax_bias(z, gamma, a)
    return a


@njit(cache=True, fastmath=True)
def _colsoftmax_backward(a, ga, gz):
    N, L, _ = a.shape
    for n in range(N):
        for j in range(L):
            dot = 0.0
            for i in range(L):
                dot += a[n, i, j] * ga[n, i, j]
            for i in range(L):
                gz[n, i, j] = a[n, i, j] * (ga[n, i, j] - dot)


def colsoftmax_backward(a: np.ndarray, ga: np.ndarray) -> np.ndarray:
    gz = np.empty_like(a)
    _colsoftmax_backward(a, ga, gz)
    return gz


@njit(cache=True, fastmath=True)
def _cm_apply(a, p, y):
    N, L, _ = a.shape
    for n in range(N):
        for i in range(L):
            acc = 0.0
            for j in range(L):
                acc += a[n, i, j] * p[n, j]
            y[n, i] = acc


def cm_apply(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    """y[n,i] = sum_j a[n,i,j] * p[n,j] for [N,L,L] x [N,L]."""
    y = np.empty_like(p)
    _cm_apply(a, p, y)
    return y


@njit(cache=True, fastmath=True)
def _cm_apply_backward(a, p, gy, ga, gp):
    N, L, _ = a.shape
    for n in range(N):
        for j in range(L):
            acc = 0.0
            for i in range(L):
                ga[n, i, j] = gy[n, i] * p[n, j]
                acc += gy[n, i] * a[n, i, j]
            gp[n, j] = acc


def cm_apply_backward(a: np.ndarray, p: np.ndarray, gy: np.ndarray):
    ga = np.empty_like(a)
    gp = np.empty_like(p)
    _cm_apply_backward(a, p, gy, ga, gp)
    return ga, gp


@njit(cache=True, fastmath=True)
def _nll_sums(y, t, eps, sums, counts):
    B, P, L = y.shape
    for b in range(B):
        s = 0.0
        n = 0
        for p in range(P):
            tv = t[b, p]
            if tv == IGNORE:
                continue
            v = float(y[b, p, tv])
            if v < eps:
                v = eps
            s -= np.log(v)
            n += 1
        sums[b] = s
        counts[b] = n


def nll_sums(y: np.ndarray, t: np.ndarray, eps: float):
    """Sum of -log(max(y[...,t], eps)) over non-IGNORE pixels, per sample.

    y: [B,P,L] probabilities, t: [B,P] uint8 labels (255 = ignore).
    Returns (sums[B] float64, counts[B] int64).
    """
    B = y.shape[0]
    sums = np.empty(B, dtype=np.float64)
    counts = np.empty(B, dtype=np.int64)
    _nll_sums(y, t, eps, sums, counts)
    return sums, counts


@njit(cache=True, fastmath=True)
def _nll_backward_into(y, t, coef, eps, gy):
    B, P, L = y.shape
    for b in range(B):
        cb = coef[b]
        for p in range(P):
            tv = t[b, p]
            if tv == IGNORE:
                continue
            v = float(y[b, p, tv])
            if v > eps:
                gy[b, p, tv] -= cb / v


def nll_backward_into(y: np.ndarray, t: np.ndarray, coef: np.ndarray, eps: float, gy: np.ndarray) -> None:
    """Accumulate d(coef[b] * nll_sum_b)/dy into gy (in place).

    Pixels where the picked probability fell below the forward clamp eps are
    in the flat region of -log(max(y, eps)) and get zero gradient.
    """
    _nll_backward_into(y, t, coef, eps, gy)


@njit(cache=True, fastmath=True)
def _trace_sums(a, sums):
    B, P, L, _ = a.shape
    for b in range(B):
        s = 0.0
        for p in range(P):
            for i in range(L):
                s += a[b, p, i, i]
        sums[b] = s


def trace_sums(a: np.ndarray) -> np.ndarray:
    """Sum of diagonals over pixels, per sample: [B,P,L,L] -> [B] float64."""
    sums = np.empty(a.shape[0], dtype=np.float64)
    _trace_sums(a, sums)
    return sums


@njit(cache=True, fastmath=True)
def _trace_backward_into(ga, coef):
    B, P, L, _ = ga.shape
    for b in range(B):
        cb = coef[b]
        for p in range(P):
            for i in range(L):
                ga[b, p, i, i] += cb


def trace_backward_into(ga: np.ndarray, coef: np.ndarray) -> None:
    """Add coef[b] to every diagonal entry of ga (in place)."""
    _trace_backward_into(ga, coef.astype(ga.dtype) if ga.dtype != np.float64 else coef)
