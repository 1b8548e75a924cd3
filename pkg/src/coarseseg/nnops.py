"""Shared neural-net building blocks: conv-as-GEMM, relu, parameter init.

Convolution weights are stored flat as [k*k*Cin, Cout] so forward/backward
are single GEMMs against the im2col patch matrix from the active kernel
backend. GEMMs run through numpy/BLAS in both backends.
"""

from __future__ import annotations

import numpy as np

from .backend import kernels as K


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, k: int):
    """Same-padded kxk convolution on [B,H,W,Cin]. Returns (y, cols cache)."""
    B, H, W, Cin = x.shape
    Cout = w.shape[1]
    if k == 1:
        cols = x
    else:
        cols = K.im2col(x, k)
    y = cols.reshape(B * H * W, -1) @ w
    y += b
    return y.reshape(B, H, W, Cout), cols


def conv_backward(cols: np.ndarray, w: np.ndarray, gy: np.ndarray, k: int, Cin: int):
    """Gradients of conv_forward. Returns (gx, gw, gb)."""
    B, H, W, Cout = gy.shape
    gy2 = gy.reshape(B * H * W, Cout)
    cols2 = cols.reshape(B * H * W, -1)
    gw = cols2.T @ gy2
    gb = gy2.sum(axis=0)
    gcols = gy2 @ w.T
    if k == 1:
        gx = gcols.reshape(B, H, W, Cin)
    else:
        gx = K.col2im(gcols.reshape(B, H, W, -1), k, Cin)
    return gx, gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # y is the relu output; y > 0 iff the pre-activation was > 0
    return np.where(y > 0, gy, 0)


def he_conv(rng: np.random.Generator, k: int, cin: int, cout: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (k * k * cin))
    return (rng.standard_normal((k * k * cin, cout)) * std).astype(dtype)


def small_conv(rng: np.random.Generator, k: int, cin: int, cout: int, dtype, std: float = 0.01) -> np.ndarray:
    return (rng.standard_normal((k * k * cin, cout)) * std).astype(dtype)
