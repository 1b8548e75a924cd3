"""Composite loss: trace-regularized positive branch, transition-matrix
complementary branch, their combination, and numerical gradient verification.

Conventions (resolution-independent): cross-entropy terms are means over the
annotated (non-IGNORE) pixels of each coarse map; trace terms are means over
all pixels of the image. Per sample, each branch sums its per-source terms;
a batch averages per-sample losses. Probabilities are clamped at eps inside
the log only (targets are never modified).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backend import kernels as K
from .model import TransitionMatrix, complementary_prediction, noisy_prediction

IGNORE = 255


class GradCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    warmup_epochs: int = 5
    branch_weights: tuple = (1.0, 1.0)
    eps: float = 1e-12

    def __post_init__(self):
        if self.lam < 0 or self.warmup_epochs < 0:
            raise ValueError("lam and warmup_epochs must be non-negative")
        if len(self.branch_weights) != 2 or min(self.branch_weights) < 0:
            raise ValueError("branch_weights must be two non-negative scalars")

    def effective_lam(self, epoch: int) -> float:
        """Trace weight with warmup: zero for the first warmup_epochs epochs."""
        return 0.0 if epoch < self.warmup_epochs else self.lam

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "warmup_epochs": self.warmup_epochs,
            "branch_weights": list(self.branch_weights),
            "eps": self.eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossConfig":
        return LossConfig(
            lam=float(d.get("lam", 0.01)),
            warmup_epochs=int(d.get("warmup_epochs", 5)),
            branch_weights=tuple(d.get("branch_weights", (1.0, 1.0))),
            eps=float(d.get("eps", 1e-12)),
        )


@dataclass
class LossFragment:
    """Unweighted per-branch terms: sum over sources of per-source means."""

    ce: float = 0.0
    trace: float = 0.0
    ce_pixels: int = 0
    trace_pixels: int = 0
    sources: int = 0


@dataclass
class LossBreakdown:
    total: float
    ce_obj: float
    trace_obj: float
    ce_comp: float
    trace_comp: float
    pixel_counts: dict = field(default_factory=dict)

    def to_metrics(self) -> dict:
        return {
            "loss_total": self.total,
            "ce_obj": self.ce_obj,
            "trace_obj": self.trace_obj,
            "ce_comp": self.ce_comp,
            "trace_comp": self.trace_comp,
        }


# ---------------------------------------------------------------------------
# spec-level single-map operations
# ---------------------------------------------------------------------------

def masked_ce(pred: np.ndarray, target: np.ndarray, eps: float = 1e-12):
    """Mean of -log pred[target] over non-IGNORE pixels. Returns (mean, count).

    pred: [..., L] probabilities; target: [...] integer labels, 255 = ignore.
    An all-IGNORE target contributes (0.0, 0).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape[:-1] != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    L = pred.shape[-1]
    y = np.ascontiguousarray(pred.reshape(1, -1, L))
    t = np.ascontiguousarray(target.reshape(1, -1).astype(np.uint8))
    sums, counts = K.nll_sums(y, t, eps)
    n = int(counts[0])
    return (float(sums[0] / n) if n else 0.0, n)


def trace_mean(cm: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean over masked pixels of the per-pixel CM trace (0.0 if mask empty)."""
    cm = np.asarray(cm)
    tr = np.trace(cm, axis1=-2, axis2=-1)
    if mask is None:
        return float(tr.mean()) if tr.size else 0.0
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tr.shape:
        raise ValueError(f"mask shape {mask.shape} does not match pixel grid {tr.shape}")
    n = int(mask.sum())
    return float(tr[mask].sum() / n) if n else 0.0


def loss_obj(
    p: np.ndarray,
    cms: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    cfg: LossConfig,
) -> LossFragment:
    """Positive branch for one sample: sum over sources of CE + trace terms."""
    if len(cms) != len(targets):
        raise ValueError(f"{len(cms)} CM stacks but {len(targets)} targets")
    frag = LossFragment(sources=len(targets))
    for cm, t in zip(cms, targets):
        ce, n = masked_ce(noisy_prediction(cm, p), t, cfg.eps)
        frag.ce += ce
        frag.ce_pixels += n
        frag.trace += trace_mean(cm)
        frag.trace_pixels += int(np.prod(cm.shape[:-2]))
    return frag


def loss_comp(
    p: np.ndarray,
    cms: Sequence[np.ndarray],
    M: TransitionMatrix | np.ndarray,
    targets: Sequence[np.ndarray],
    cfg: LossConfig,
) -> LossFragment:
    """Complementary branch for one sample: CE of M^T(A·p) against negative maps."""
    if len(cms) != len(targets):
        raise ValueError(f"{len(cms)} CM stacks but {len(targets)} targets")
    m = M.values if isinstance(M, TransitionMatrix) else np.asarray(M)
    if m.shape[0] != p.shape[-1]:
        raise ValueError(f"M is {m.shape} but predictions have L={p.shape[-1]}")
    frag = LossFragment(sources=len(targets))
    for cm, t in zip(cms, targets):
        v = complementary_prediction(m, noisy_prediction(cm, p))
        ce, n = masked_ce(v, t, cfg.eps)
        frag.ce += ce
        frag.ce_pixels += n
        frag.trace += trace_mean(cm)
        frag.trace_pixels += int(np.prod(cm.shape[:-2]))
    return frag


def loss_final(obj: LossFragment, comp: LossFragment, cfg: LossConfig) -> LossBreakdown:
    """Weighted combination; breakdown keeps unweighted per-branch terms."""
    w_obj, w_comp = cfg.branch_weights
    total = w_obj * (obj.ce + cfg.lam * obj.trace) + w_comp * (comp.ce + cfg.lam * comp.trace)
    return LossBreakdown(
        total=float(total),
        ce_obj=obj.ce,
        trace_obj=obj.trace,
        ce_comp=comp.ce,
        trace_comp=comp.trace,
        pixel_counts={
            "ce_obj": obj.ce_pixels,
            "trace_obj": obj.trace_pixels,
            "ce_comp": comp.ce_pixels,
            "trace_comp": comp.trace_pixels,
        },
    )


# ---------------------------------------------------------------------------
# batched training loss with gradients
# ---------------------------------------------------------------------------

@dataclass
class BranchTargets:
    """Flattened targets for one branch: per-source label maps + presence."""

    targets: list  # each [B,P] uint8 (IGNORE where unannotated or absent)
    present: list  # each [B] bool: sample actually has this source


def batch_terms(
    p: np.ndarray,
    a_obj: np.ndarray | None,
    a_comp: np.ndarray | None,
    m: np.ndarray | None,
    obj_t: BranchTargets,
    comp_t: BranchTargets,
    lam: float,
    weights: tuple,
    eps: float = 1e-12,
):
    """Loss and input-side gradients for one batch.

    p: [B,P,L]; a_obj/a_comp: [B,P,L,L] or None (None = identity CMs, frozen);
    m: [L,L]. Returns (LossBreakdown, gp, ga_obj, ga_comp); gradient arrays
    are None for branches that receive no gradient.
    """
    B, P, L = p.shape
    w_obj, w_comp = weights
    pf = np.ascontiguousarray(p.reshape(B * P, L))
    gp = np.zeros_like(p)
    breakdown = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, {
        "ce_obj": 0, "trace_obj": 0, "ce_comp": 0, "trace_comp": 0,
    })

    ga_obj = None
    if obj_t.targets and w_obj > 0:
        af = None if a_obj is None else np.ascontiguousarray(a_obj.reshape(B * P, L, L))
        y = p if a_obj is None else K.cm_apply(af, pf).reshape(B, P, L)
        gy = np.zeros_like(p)
        tr_coef = np.zeros(B)
        if a_obj is not None:
            tsum = K.trace_sums(a_obj)
        for t, present in zip(obj_t.targets, obj_t.present):
            sums, counts = K.nll_sums(y, t, eps)
            live = present & (counts > 0)
            means = np.where(live, sums / np.maximum(counts, 1), 0.0)
            breakdown.ce_obj += float(means.sum() / B)
            breakdown.pixel_counts["ce_obj"] += int(counts[present].sum())
            coef = np.where(live, w_obj / (B * np.maximum(counts, 1)), 0.0)
            K.nll_backward_into(y, t, coef, eps, gy)
            if a_obj is not None:
                tmeans = np.where(present, tsum / P, 0.0)
                breakdown.trace_obj += float(tmeans.sum() / B)
                breakdown.pixel_counts["trace_obj"] += int(P * np.count_nonzero(present))
                tr_coef += np.where(present, lam * w_obj / (B * P), 0.0)
            else:
                # identity CMs: trace is exactly L per present source
                breakdown.trace_obj += float(L * np.count_nonzero(present) / B)
                breakdown.pixel_counts["trace_obj"] += int(P * np.count_nonzero(present))
        if a_obj is None:
            gp += gy
        else:
            ga_obj, gpf = K.cm_apply_backward(af, pf, np.ascontiguousarray(gy.reshape(B * P, L)))
            ga_obj = ga_obj.reshape(B, P, L, L)
            gp += gpf.reshape(B, P, L)
            if lam > 0:
                K.trace_backward_into(ga_obj, tr_coef)

    ga_comp = None
    if comp_t.targets and w_comp > 0:
        if m is None:
            raise ValueError("complementary branch requires a transition matrix")
        af = None if a_comp is None else np.ascontiguousarray(a_comp.reshape(B * P, L, L))
        u = p if a_comp is None else K.cm_apply(af, pf).reshape(B, P, L)
        v = u @ m.astype(u.dtype)
        gv = np.zeros_like(v)
        tr_coef = np.zeros(B)
        if a_comp is not None:
            tsum = K.trace_sums(a_comp)
        for t, present in zip(comp_t.targets, comp_t.present):
            sums, counts = K.nll_sums(v, t, eps)
            live = present & (counts > 0)
            means = np.where(live, sums / np.maximum(counts, 1), 0.0)
            breakdown.ce_comp += float(means.sum() / B)
            breakdown.pixel_counts["ce_comp"] += int(counts[present].sum())
            coef = np.where(live, w_comp / (B * np.maximum(counts, 1)), 0.0)
            K.nll_backward_into(v, t, coef, eps, gv)
            if a_comp is not None:
                tmeans = np.where(present, tsum / P, 0.0)
                breakdown.trace_comp += float(tmeans.sum() / B)
                breakdown.pixel_counts["trace_comp"] += int(P * np.count_nonzero(present))
                tr_coef += np.where(present, lam * w_comp / (B * P), 0.0)
            else:
                breakdown.trace_comp += float(L * np.count_nonzero(present) / B)
                breakdown.pixel_counts["trace_comp"] += int(P * np.count_nonzero(present))
        gu = gv @ m.T.astype(v.dtype)
        if a_comp is None:
            gp += gu
        else:
            ga_comp, gpf = K.cm_apply_backward(af, pf, np.ascontiguousarray(gu.reshape(B * P, L)))
            ga_comp = ga_comp.reshape(B, P, L, L)
            gp += gpf.reshape(B, P, L)
            if lam > 0:
                K.trace_backward_into(ga_comp, tr_coef)

    breakdown.total = float(
        w_obj * (breakdown.ce_obj + lam * breakdown.trace_obj)
        + w_comp * (breakdown.ce_comp + lam * breakdown.trace_comp)
    )
    return breakdown, gp, ga_obj, ga_comp


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

def toy_loss_evaluator(
    L: int = 2,
    size: int = 4,
    batch: int = 2,
    dtype: str = "float64",
    seed: int = 0,
    lam: float = 0.01,
    weights: tuple = (1.0, 1.0),
):
    """Small deterministic loss_final instance for gradient checking.

    Builds a 1-stage model on a random size x size batch with both branches
    active. Returns (f, tensors) where f maps a parameter dict to
    (loss, gradient dict) and tensors is the freshly initialized dict.
    """
    from . import model as M

    arch = M.ArchDescriptor(
        num_classes=L, seg_channels=(4,), ann_channels=(4, 6), dtype=dtype
    )
    params0 = M.init_params(arch, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0, 1, size=(batch, size, size, 1)).astype(arch.np_dtype)
    P = size * size
    pos_t = rng.integers(0, L, size=(batch, P)).astype(np.uint8)
    neg_t = rng.integers(0, L, size=(batch, P)).astype(np.uint8)
    neg_t[rng.uniform(size=(batch, P)) < 0.5] = IGNORE
    present = np.ones(batch, dtype=bool)
    m = M.build_transition_matrix(L, "uniform").values

    def f(tensors: dict):
        params = M.ModelParams(arch, seed, tensors)
        p, seg_cache = M.seg_forward_batch(params, x)
        amaps, ann_cache = M.ann_forward_batch(params, x)
        B, H, W, LL = p.shape
        bd, gp, ga_obj, ga_comp = batch_terms(
            p.reshape(B, P, L),
            amaps["objective"].reshape(B, P, L, L),
            amaps["complementary"].reshape(B, P, L, L),
            m,
            BranchTargets([pos_t], [present]),
            BranchTargets([neg_t], [present]),
            lam,
            weights,
        )
        grads: dict = {}
        M.seg_backward(params, seg_cache, gp.reshape(B, H, W, L), grads)
        gA = {}
        if ga_obj is not None:
            gA["objective"] = ga_obj.reshape(B, H, W, L, L)
        if ga_comp is not None:
            gA["complementary"] = ga_comp.reshape(B, H, W, L, L)
        if gA:
            M.ann_backward(params, ann_cache, gA, grads)
        for k, v in tensors.items():
            grads.setdefault(k, np.zeros_like(v))
        return bd.total, grads

    return f, params0.tensors

def grad_check(
    f: Callable[[dict], tuple],
    params: dict,
    eps: float = 1e-5,
    num_samples: int = 50,
    seed: int = 0,
    keys: Sequence[str] | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    f maps a {name: ndarray} dict to (loss, {name: gradient ndarray}). A
    subset of parameter entries is sampled uniformly across the selected
    keys; for each, the analytic entry is compared against the two-sided
    difference quotient. Relative error uses max(|analytic|, |fd|, 1e-12)
    in the denominator.
    """
    loss0, grads = f(params)
    if not np.isfinite(loss0):
        raise GradCheckError(f"loss is not finite: {loss0}")
    names = list(keys) if keys is not None else sorted(params.keys())
    sizes = np.array([params[k].size for k in names])
    if sizes.sum() == 0:
        raise ValueError("no parameters to check")
    rng = np.random.default_rng(seed)
    flat_choices = rng.choice(sizes.sum(), size=min(num_samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat in np.sort(flat_choices):
        ki = int(np.searchsorted(bounds, flat, side="right"))
        idx = int(flat - (bounds[ki - 1] if ki else 0))
        name = names[ki]
        base = params[name].flat[idx]
        stepped = {k: (v.copy() if k == name else v) for k, v in params.items()}
        stepped[name].flat[idx] = base + eps
        lp, _ = f(stepped)
        stepped[name].flat[idx] = base - eps
        lm, _ = f(stepped)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise GradCheckError("perturbed loss is not finite")
        fd = (lp - lm) / (2 * eps)
        analytic = float(grads[name].flat[idx])
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)
        worst = max(worst, rel)
    return worst
