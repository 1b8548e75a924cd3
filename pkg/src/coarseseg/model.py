"""Forward computations of the two coupled networks.

- Segmentation U-Net producing per-pixel class probabilities [H,W,L].
- Annotation network: shared encoder with one head per branch, emitting
  per-pixel column-stochastic LxL confusion matrices (objective branch for
  positive coarse labels, complementary branch for negative ones).
- The fixed zero-diagonal row-stochastic transition matrix routing the
  complementary branch, and the composed predictions.

Array conventions: probability maps are [H,W,L] (batched: [B,H,W,L]),
confusion-matrix stacks are [H,W,L,L] with [..., i, j] = p(noisy label i |
true label j), i.e. columns sum to 1. The transition matrix is [L,L] with
rows summing to 1, zero diagonal, and complementary prediction v = M^T u.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .backend import kernels as K
from . import nnops

BRANCHES = ("objective", "complementary")

# instrumentation: incremented on every annotation-network forward; the
# trainer asserts this stays 0 in strong-supervision mode
OP_COUNTERS = {"cm_forward": 0}


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# descriptors and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchDescriptor:
    """Fixes every layer shape of both networks."""

    num_classes: int
    in_channels: int = 1
    seg_channels: tuple = (8, 16, 32)
    ann_channels: tuple = (8, 16)
    gamma: float = 4.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.seg_channels) < 1 or len(self.ann_channels) != 2:
            raise ValueError("need >=1 seg stage and exactly 2 ann stages")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "seg_channels": list(self.seg_channels),
            "ann_channels": list(self.ann_channels),
            "gamma": self.gamma,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchDescriptor":
        return ArchDescriptor(
            num_classes=int(d["num_classes"]),
            in_channels=int(d.get("in_channels", 1)),
            seg_channels=tuple(d.get("seg_channels", (8, 16, 32))),
            ann_channels=tuple(d.get("ann_channels", (8, 16))),
            gamma=float(d.get("gamma", 4.0)),
            dtype=str(d.get("dtype", "float32")),
        )


@dataclass
class ModelParams:
    """Parameter sets of both networks, keyed 'seg/...' and 'ann/...'."""

    arch: ArchDescriptor
    seed: int
    tensors: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.seed, {k: v.copy() for k, v in self.tensors.items()})

    def seg_keys(self) -> list:
        return [k for k in self.tensors if k.startswith("seg/")]

    def ann_keys(self) -> list:
        return [k for k in self.tensors if k.startswith("ann/")]


def init_params(arch: ArchDescriptor, seed: int) -> ModelParams:
    """Seeded parameter init.

    The segmentation and annotation networks draw from independent child
    streams of the seed, so the segmentation init does not depend on whether
    the annotation network is used at all.
    """
    seg_ss, ann_ss = np.random.SeedSequence(seed).spawn(2)
    seg_rng = np.random.default_rng(seg_ss)
    ann_rng = np.random.default_rng(ann_ss)
    dt = arch.np_dtype
    L = arch.num_classes
    t: dict = {}

    chans = list(arch.seg_channels)
    cin = arch.in_channels
    for s, c in enumerate(chans):
        t[f"seg/enc{s}/w"] = nnops.he_conv(seg_rng, 3, cin, c, dt)
        t[f"seg/enc{s}/b"] = np.zeros(c, dtype=dt)
        cin = c
    t["seg/btm/w"] = nnops.he_conv(seg_rng, 3, chans[-1], chans[-1], dt)
    t["seg/btm/b"] = np.zeros(chans[-1], dtype=dt)
    up = chans[-1]
    for s in range(len(chans) - 1, -1, -1):
        t[f"seg/dec{s}/w"] = nnops.he_conv(seg_rng, 3, up + chans[s], chans[s], dt)
        t[f"seg/dec{s}/b"] = np.zeros(chans[s], dtype=dt)
        up = chans[s]
    t["seg/out/w"] = nnops.small_conv(seg_rng, 1, chans[0], L, dt)
    t["seg/out/b"] = np.zeros(L, dtype=dt)

    a0, a1 = arch.ann_channels
    t["ann/enc0/w"] = nnops.he_conv(ann_rng, 3, arch.in_channels, a0, dt)
    t["ann/enc0/b"] = np.zeros(a0, dtype=dt)
    t["ann/enc1/w"] = nnops.he_conv(ann_rng, 3, a0, a1, dt)
    t["ann/enc1/b"] = np.zeros(a1, dtype=dt)
    for head in ("obj", "comp"):
        t[f"ann/head_{head}/w"] = nnops.small_conv(ann_rng, 1, a0 + a1, L * L, dt)
        t[f"ann/head_{head}/b"] = np.zeros(L * L, dtype=dt)
    return ModelParams(arch, seed, t)


# ---------------------------------------------------------------------------
# validators for probability-shaped arrays
# ---------------------------------------------------------------------------

def assert_prob_map(p: np.ndarray, tol: float = 1e-5) -> None:
    """Entries in [0,1] and per-pixel class vectors summing to 1 +- tol."""
    if p.min() < -tol or p.max() > 1 + tol:
        raise ValueError("probabilities outside [0,1]")
    s = p.sum(axis=-1)
    if np.abs(s - 1).max() > tol:
        raise ValueError(f"per-pixel sums deviate from 1 by {np.abs(s - 1).max():.3g}")


def assert_cm_stack(a: np.ndarray, tol: float = 1e-5) -> None:
    """Entries in [0,1]; every per-pixel column sums to 1 +- tol."""
    if a.min() < -tol or a.max() > 1 + tol:
        raise ValueError("CM entries outside [0,1]")
    s = a.sum(axis=-2)
    if np.abs(s - 1).max() > tol:
        raise ValueError(f"CM column sums deviate from 1 by {np.abs(s - 1).max():.3g}")


# ---------------------------------------------------------------------------
# transition matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionMatrix:
    """Global LxL zero-diagonal row-stochastic matrix.

    values[i, j] = p(complementary label j | intermediate label i).
    """

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 2:
            raise ValueError("transition matrix must be LxL with L >= 2")
        if np.abs(np.diag(v)).max() > 0:
            raise ValueError("transition matrix diagonal must be exactly zero")
        if v.min() < 0 or v.max() > 1:
            raise ValueError("transition matrix entries must lie in [0,1]")
        rs = v.sum(axis=1)
        if np.abs(rs - 1).max() > 1e-9:
            raise ValueError("transition matrix rows must sum to 1 +- 1e-9")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


def build_transition_matrix(L: int, mode: str = "uniform", values=None) -> TransitionMatrix:
    """Uniform mode: off-diagonal 1/(L-1), zero diagonal. Custom: validated."""
    if L < 2:
        raise ValueError("L must be >= 2")
    if mode == "uniform":
        m = np.full((L, L), 1.0 / (L - 1))
        np.fill_diagonal(m, 0.0)
        return TransitionMatrix(m)
    if mode == "custom":
        if values is None:
            raise ValueError("custom mode requires values")
        m = np.asarray(values, dtype=np.float64)
        if m.shape != (L, L):
            raise ValueError(f"custom values must be {L}x{L}")
        return TransitionMatrix(m)
    raise ValueError(f"unknown transition-matrix mode {mode!r}")


# ---------------------------------------------------------------------------
# batched forward/backward passes
# ---------------------------------------------------------------------------

def _as_batch(image: np.ndarray, arch: ArchDescriptor) -> np.ndarray:
    x = np.asarray(image, dtype=arch.np_dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != arch.in_channels:
        raise ShapeError(
            f"expected HxWx{arch.in_channels} image, got shape {np.asarray(image).shape}"
        )
    return x[None]


def _check_batch(x: np.ndarray, arch: ArchDescriptor) -> None:
    if x.ndim != 4 or x.shape[3] != arch.in_channels:
        raise ShapeError(f"expected [B,H,W,{arch.in_channels}], got {x.shape}")
    min_side = 2 ** len(arch.seg_channels)
    if x.shape[1] < min_side or x.shape[2] < min_side:
        raise ShapeError(f"image sides must be >= {min_side} for this architecture")


def seg_forward_batch(params: ModelParams, x: np.ndarray):
    """Segmentation probabilities for a batch. Returns (p [B,H,W,L], cache)."""
    arch = params.arch
    x = np.ascontiguousarray(x, dtype=arch.np_dtype)
    _check_batch(x, arch)
    t = params.tensors
    S = len(arch.seg_channels)
    cache: dict = {"x": x, "enc": [], "pool": [], "dec": []}

    h = x
    for s in range(S):
        if s > 0:
            size = (h.shape[1], h.shape[2])
            h, idx = K.maxpool2(h)
            cache["pool"].append((idx, size))
        y, cols = nnops.conv_forward(h, t[f"seg/enc{s}/w"], t[f"seg/enc{s}/b"], 3)
        h = nnops.relu(y)
        cache["enc"].append((cols, h))
    size = (h.shape[1], h.shape[2])
    hp, idx = K.maxpool2(h)
    cache["btm_pool"] = (idx, size)
    y, cols = nnops.conv_forward(hp, t["seg/btm/w"], t["seg/btm/b"], 3)
    d = nnops.relu(y)
    cache["btm"] = (cols, d, hp.shape)

    for s in range(S - 1, -1, -1):
        skip = cache["enc"][s][1]
        up = K.resize_nearest(d, skip.shape[1], skip.shape[2])
        cat = np.concatenate([up, skip], axis=3)
        y, cols = nnops.conv_forward(cat, t[f"seg/dec{s}/w"], t[f"seg/dec{s}/b"], 3)
        dnew = nnops.relu(y)
        cache["dec"].append((cols, dnew, d.shape, up.shape[3]))
        d = dnew
    logits, cols_out = nnops.conv_forward(d, t["seg/out/w"], t["seg/out/b"], 1)
    cache["out"] = (cols_out, d.shape)
    B, H, W, L = logits.shape
    p = K.softmax_last(logits.reshape(B * H * W, L)).reshape(B, H, W, L)
    cache["p"] = p
    return p, cache


def seg_backward(params: ModelParams, cache: dict, gp: np.ndarray, grads: dict) -> None:
    """Accumulate d(loss)/d(seg params) into grads given d(loss)/d(p)."""
    arch = params.arch
    t = params.tensors
    S = len(arch.seg_channels)
    p = cache["p"]
    B, H, W, L = p.shape
    glogits = K.softmax_last_backward(
        p.reshape(B * H * W, L), np.ascontiguousarray(gp.reshape(B * H * W, L))
    ).reshape(B, H, W, L)

    cols_out, d_shape = cache["out"]
    gd, gw, gb = nnops.conv_backward(cols_out, t["seg/out/w"], glogits, 1, d_shape[3])
    _acc(grads, "seg/out/w", gw)
    _acc(grads, "seg/out/b", gb)

    for rev, s in enumerate(range(0, S)):
        cols, dnew, dprev_shape, up_ch = cache["dec"][S - 1 - s]
        gy = nnops.relu_backward(dnew, gd)
        cat_ch = t[f"seg/dec{s}/w"].shape[0] // 9
        gcat, gw, gb = nnops.conv_backward(cols, t[f"seg/dec{s}/w"], gy, 3, cat_ch)
        _acc(grads, f"seg/dec{s}/w", gw)
        _acc(grads, f"seg/dec{s}/b", gb)
        gup = np.ascontiguousarray(gcat[:, :, :, :up_ch])
        gskip = np.ascontiguousarray(gcat[:, :, :, up_ch:])
        # stash the skip gradient; the encoder pass below consumes it
        cache.setdefault("gskip", {})[s] = gskip
        gd = K.resize_nearest_backward(gup, dprev_shape[1], dprev_shape[2])

    cols, dout, hp_shape = cache["btm"]
    gy = nnops.relu_backward(dout, gd)
    ghp, gw, gb = nnops.conv_backward(cols, t["seg/btm/w"], gy, 3, hp_shape[3])
    _acc(grads, "seg/btm/w", gw)
    _acc(grads, "seg/btm/b", gb)
    idx, size = cache["btm_pool"]
    ge = K.maxpool2_backward(ghp, idx, size[0], size[1])

    for s in range(S - 1, -1, -1):
        cols, h = cache["enc"][s]
        ge = ge + cache["gskip"][s]
        gy = nnops.relu_backward(h, ge)
        cin = t[f"seg/enc{s}/w"].shape[0] // 9
        gx, gw, gb = nnops.conv_backward(cols, t[f"seg/enc{s}/w"], gy, 3, cin)
        _acc(grads, f"seg/enc{s}/w", gw)
        _acc(grads, f"seg/enc{s}/b", gb)
        if s > 0:
            idx, size = cache["pool"][s - 1]
            ge = K.maxpool2_backward(gx, idx, size[0], size[1])


def ann_forward_batch(params: ModelParams, x: np.ndarray, branches: Iterable[str] = BRANCHES):
    """Per-pixel confusion matrices for a batch.

    Returns ({branch: A [B,H,W,L,L]}, cache). Columns of every A sum to 1;
    the diagonal bias gamma makes freshly initialized CMs near-identity.
    """
    arch = params.arch
    x = np.ascontiguousarray(x, dtype=arch.np_dtype)
    _check_batch(x, arch)
    OP_COUNTERS["cm_forward"] += 1
    t = params.tensors
    L = arch.num_classes
    B, H, W, _ = x.shape

    y, cols0 = nnops.conv_forward(x, t["ann/enc0/w"], t["ann/enc0/b"], 3)
    a0 = nnops.relu(y)
    a0p, idx = K.maxpool2(a0)
    y, cols1 = nnops.conv_forward(a0p, t["ann/enc1/w"], t["ann/enc1/b"], 3)
    a1 = nnops.relu(y)
    a1u = K.resize_nearest(a1, H, W)
    feats = np.concatenate([a0, a1u], axis=3)
    cache = {
        "x": x, "cols0": cols0, "a0": a0, "idx": idx, "cols1": cols1,
        "a1": a1, "a1_shape": a1.shape, "feats": feats, "A": {},
    }
    out = {}
    for br in branches:
        head = "obj" if br == "objective" else "comp"
        z, _ = nnops.conv_forward(feats, t[f"ann/head_{head}/w"], t[f"ann/head_{head}/b"], 1)
        A = K.colsoftmax_bias(np.ascontiguousarray(z.reshape(B * H * W, L, L)), arch.gamma)
        out[br] = A.reshape(B, H, W, L, L)
        cache["A"][br] = out[br]
    return out, cache


def ann_backward(params: ModelParams, cache: dict, gA: dict, grads: dict) -> None:
    """Accumulate d(loss)/d(ann params) into grads given per-branch dA."""
    arch = params.arch
    t = params.tensors
    L = arch.num_classes
    feats = cache["feats"]
    B, H, W, F = feats.shape
    gfeats = np.zeros_like(feats)
    for br, g in gA.items():
        head = "obj" if br == "objective" else "comp"
        A = cache["A"][br].reshape(B * H * W, L, L)
        gz = K.colsoftmax_backward(A, np.ascontiguousarray(g.reshape(B * H * W, L, L)))
        gz = gz.reshape(B, H, W, L * L)
        gf, gw, gb = nnops.conv_backward(feats, t[f"ann/head_{head}/w"], gz, 1, F)
        _acc(grads, f"ann/head_{head}/w", gw)
        _acc(grads, f"ann/head_{head}/b", gb)
        gfeats += gf

    a0, a1 = cache["a0"], cache["a1"]
    c0 = a0.shape[3]
    ga0 = np.ascontiguousarray(gfeats[:, :, :, :c0])
    ga1u = np.ascontiguousarray(gfeats[:, :, :, c0:])
    ga1 = K.resize_nearest_backward(ga1u, a1.shape[1], a1.shape[2])
    gy = nnops.relu_backward(a1, ga1)
    ga0p, gw, gb = nnops.conv_backward(cache["cols1"], t["ann/enc1/w"], gy, 3, c0)
    _acc(grads, "ann/enc1/w", gw)
    _acc(grads, "ann/enc1/b", gb)
    ga0 = ga0 + K.maxpool2_backward(ga0p, cache["idx"], H, W)
    gy = nnops.relu_backward(a0, ga0)
    _, gw, gb = nnops.conv_backward(cache["cols0"], t["ann/enc0/w"], gy, 3, arch.in_channels)
    _acc(grads, "ann/enc0/w", gw)
    _acc(grads, "ann/enc0/b", gb)


def _acc(grads: dict, key: str, g: np.ndarray) -> None:
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g


# ---------------------------------------------------------------------------
# public single-image operations
# ---------------------------------------------------------------------------

def seg_forward(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Segmentation probabilities [H,W,L] for one image (softmax over classes)."""
    x = _as_batch(image, params.arch)
    p, _ = seg_forward_batch(params, x)
    return p[0]


def cm_forward(params: ModelParams, image: np.ndarray, branch: str) -> np.ndarray:
    """Per-pixel confusion matrices [H,W,L,L] for one image and branch."""
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    x = _as_batch(image, params.arch)
    out, _ = ann_forward_batch(params, x, branches=(branch,))
    return out[branch][0]


def noisy_prediction(cm: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Compose per-pixel CMs with probabilities: out_i = sum_j cm[...,i,j] p_j.

    Accepts [H,W,...] or [B,H,W,...]; leading dims just need to agree.
    """
    cm = np.asarray(cm)
    p = np.asarray(p)
    if cm.shape[:-2] != p.shape[:-1] or cm.shape[-1] != p.shape[-1] or cm.shape[-2] != cm.shape[-1]:
        raise ShapeError(f"incompatible shapes {cm.shape} and {p.shape}")
    L = p.shape[-1]
    y = K.cm_apply(
        np.ascontiguousarray(cm.reshape(-1, L, L)), np.ascontiguousarray(p.reshape(-1, L))
    )
    return y.reshape(p.shape)


def complementary_prediction(M: TransitionMatrix | np.ndarray, u: np.ndarray) -> np.ndarray:
    """v = M^T u per pixel: v[...,j] = sum_i M[i,j] * u[...,i]."""
    m = M.values if isinstance(M, TransitionMatrix) else np.asarray(M)
    u = np.asarray(u)
    if u.shape[-1] != m.shape[0]:
        raise ShapeError(f"class-count mismatch: u has {u.shape[-1]}, M is {m.shape}")
    return u @ m.astype(u.dtype)


def save_checkpoint(path, params: ModelParams, extra: dict | None = None, opt_state: dict | None = None) -> None:
    """Versioned checkpoint: npz blob + JSON sidecar with the descriptor."""
    import os

    arrays = {f"t::{k}": v for k, v in params.tensors.items()}
    if opt_state:
        for k, v in opt_state.items():
            arrays[f"o::{k}"] = v
    tmp = str(path) + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, str(path))
    meta = {"format": 1, "L": params.arch.num_classes, "arch": params.arch.to_dict(), "seed": params.seed}
    meta.update(extra or {})
    tmp_meta = str(path) + ".json.tmp"
    with open(tmp_meta, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    os.replace(tmp_meta, str(path) + ".json")


def load_checkpoint(path):
    """Returns (ModelParams, meta dict, opt_state dict)."""
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    if meta.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    arch = ArchDescriptor.from_dict(meta["arch"])
    blob = np.load(str(path))
    tensors = {}
    opt_state = {}
    for k in blob.files:
        if k.startswith("t::"):
            tensors[k[3:]] = blob[k]
        elif k.startswith("o::"):
            opt_state[k[3:]] = blob[k]
    return ModelParams(arch, int(meta.get("seed", 0)), tensors), meta, opt_state
