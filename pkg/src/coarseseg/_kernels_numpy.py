"""Pure-numpy kernel implementations (fallback backend).

Same semantics as `_kernels_numba`; see `backend` for selection. Activation
layout is channels-last throughout: [B, H, W, C]. Reductions that feed loss
values accumulate in float64 regardless of the activation dtype.
"""

from __future__ import annotations

import numpy as np

IGNORE = 255


# ---------------------------------------------------------------------------
# convolution plumbing (GEMMs themselves happen in the caller via numpy/BLAS)
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,H,W,C] -> [B,H,W,k*k*C] patch matrix, zero-padded 'same', (u,v,c) order."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + H, p:p + W, :] = x
    cols = np.empty((B, H, W, k * k, C), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, :, u * k + v, :] = xp[:, u:u + H, v:v + W, :]
    return cols.reshape(B, H, W, k * k * C)


def col2im(cols: np.ndarray, k: int, C: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to [B,H,W,C]."""
    B, H, W, _ = cols.shape
    p = k // 2
    cols = cols.reshape(B, H, W, k * k, C)
    out = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, u:u + H, v:v + W, :] += cols[:, :, :, u * k + v, :]
    return np.ascontiguousarray(out[:, p:p + H, p:p + W, :])


# ---------------------------------------------------------------------------
# 2x2 max pooling (ceil mode) and nearest-neighbor resize
# ---------------------------------------------------------------------------

def maxpool2(x: np.ndarray):
    """Ceil-mode 2x2/stride-2 max pool. Returns (y, idx) with idx in {0..3}."""
    B, H, W, C = x.shape
    Hc, Wc = (H + 1) // 2, (W + 1) // 2
    xp = np.full((B, 2 * Hc, 2 * Wc, C), -np.inf, dtype=x.dtype)
    xp[:, :H, :W, :] = x
    blocks = xp.reshape(B, Hc, 2, Wc, 2, C).transpose(0, 1, 3, 2, 4, 5)
    blocks = blocks.reshape(B, Hc, Wc, 4, C)
    idx = blocks.argmax(axis=3).astype(np.uint8)
    y = np.take_along_axis(blocks, idx[:, :, :, None, :].astype(np.int64), axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy: np.ndarray, idx: np.ndarray, H: int, W: int) -> np.ndarray:
    """Route pooled gradients back to the argmax positions of the input."""
    B, Hc, Wc, C = gy.shape
    blocks = np.zeros((B, Hc, Wc, 4, C), dtype=gy.dtype)
    np.put_along_axis(blocks, idx[:, :, :, None, :].astype(np.int64), gy[:, :, :, None, :], axis=3)
    gxp = blocks.reshape(B, Hc, Wc, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    gxp = gxp.reshape(B, 2 * Hc, 2 * Wc, C)
    return np.ascontiguousarray(gxp[:, :H, :W, :])


def _nearest_index(dst: int, src: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def resize_nearest(x: np.ndarray, H: int, W: int) -> np.ndarray:
    """Nearest-neighbor resize [B,h,w,C] -> [B,H,W,C] (floor index map)."""
    ih = _nearest_index(H, x.shape[1])
    iw = _nearest_index(W, x.shape[2])
    return np.ascontiguousarray(x[:, ih][:, :, iw])


def resize_nearest_backward(gy: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of resize_nearest: sum gradients over each source preimage."""
    B, H, W, C = gy.shape
    ih = _nearest_index(H, h)
    iw = _nearest_index(W, w)
    if H >= h and W >= w:
        row_starts = np.searchsorted(ih, np.arange(h))
        col_starts = np.searchsorted(iw, np.arange(w))
        gx = np.add.reduceat(gy, row_starts, axis=1)
        gx = np.add.reduceat(gx, col_starts, axis=2)
        return np.ascontiguousarray(gx)
    gx = np.zeros((B, h, w, C), dtype=gy.dtype)
    np.add.at(gx, (slice(None), ih[:, None], iw[None, :]), gy)
    return gx


# ---------------------------------------------------------------------------
# softmax variants
# ---------------------------------------------------------------------------

def softmax_last(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis of [N,K]."""
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_last_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = np.sum(y * gy, axis=-1, keepdims=True)
    return y * (gy - dot)


def colsoftmax_bias(z: np.ndarray, gamma: float) -> np.ndarray:
    """Column softmax of [N,L,L] logits with +gamma added on the diagonal.

    Output column j (axis 1 runs over the noisy label i) sums to 1.
    """
    L = z.shape[1]
    zb = z + gamma * np.eye(L, dtype=z.dtype)
    zb -= zb.max(axis=1, keepdims=True)
    np.exp(zb, out=zb)
    zb /= zb.sum(axis=1, keepdims=True)
    return zb


def colsoftmax_backward(a: np.ndarray, ga: np.ndarray) -> np.ndarray:
    dot = np.sum(a * ga, axis=1, keepdims=True)
    return a * (ga - dot)


# ---------------------------------------------------------------------------
# per-pixel confusion-matrix products
# ---------------------------------------------------------------------------

def cm_apply(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    """y[n,i] = sum_j a[n,i,j] * p[n,j] for [N,L,L] x [N,L]."""
    return np.einsum('nij,nj->ni', a, p)


def cm_apply_backward(a: np.ndarray, p: np.ndarray, gy: np.ndarray):
    ga = gy[:, :, None] * p[:, None, :]
    gp = np.einsum('ni,nij->nj', gy, a)
    return ga, gp


# ---------------------------------------------------------------------------
# masked NLL and trace reductions (per-sample sums, float64 accumulators)
# ---------------------------------------------------------------------------

def nll_sums(y: np.ndarray, t: np.ndarray, eps: float):
    """Sum of -log(max(y[...,t], eps)) over non-IGNORE pixels, per sample.

    y: [B,P,L] probabilities, t: [B,P] uint8 labels (255 = ignore).
    Returns (sums[B] float64, counts[B] int64).
    """
    valid = t != IGNORE
    tt = np.where(valid, t, 0).astype(np.int64)
    picked = np.take_along_axis(y, tt[:, :, None], axis=2)[:, :, 0]
    logs = -np.log(np.maximum(picked.astype(np.float64), eps))
    sums = np.sum(logs, axis=1, where=valid, dtype=np.float64)
    counts = valid.sum(axis=1).astype(np.int64)
    return sums, counts


def nll_backward_into(y: np.ndarray, t: np.ndarray, coef: np.ndarray, eps: float, gy: np.ndarray) -> None:
    """Accumulate d(coef[b] * nll_sum_b)/dy into gy (in place).

    Pixels where the picked probability fell below the forward clamp eps are
    in the flat region of -log(max(y, eps)) and get zero gradient.
    """
    valid = t != IGNORE
    tt = np.where(valid, t, 0).astype(np.int64)
    picked = np.take_along_axis(y, tt[:, :, None], axis=2)[:, :, 0]
    live = valid & (picked > eps)
    grad = np.where(live, -coef[:, None] / np.maximum(picked.astype(np.float64), eps), 0.0)
    cur = np.take_along_axis(gy, tt[:, :, None], axis=2)[:, :, 0]
    np.put_along_axis(gy, tt[:, :, None], (cur + grad.astype(gy.dtype))[:, :, None], axis=2)


def trace_sums(a: np.ndarray) -> np.ndarray:
    """Sum of diagonals over pixels, per sample: [B,P,L,L] -> [B] float64."""
    return np.trace(a, axis1=2, axis2=3).sum(axis=1, dtype=np.float64)


def trace_backward_into(ga: np.ndarray, coef: np.ndarray) -> None:
    """Add coef[b] to every diagonal entry of ga (in place)."""
    L = ga.shape[2]
    idx = np.arange(L)
    ga[:, :, idx, idx] += coef[:, None, None].astype(ga.dtype)
