"""End-to-end optimization of the two networks over the combined loss.

Supports weak (coarse labels only), strong (dense masks, no CM/TM path) and
semi (mask subset + coarse subset) supervision; SGD/momentum and Adam;
deterministic seeded runs; checkpointing with resume; and the ablation suite
(full / without negative annotations / naive CE on coarse labels).

Run artifacts under out_dir: config.json (resolved copy), metrics.jsonl
(one row per epoch and split, schema documented in the README), ckpt_ep*.npz
(+ .json sidecars), report.json.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluate as evalmod
from . import model as M
from .datasets import IGNORE, SegDataset, load_dataset
from .loss import BranchTargets, LossConfig, batch_terms

MODES = ("weak", "strong", "semi")


class TrainError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.name!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    def to_dict(self):
        return {"name": self.name, "lr": self.lr, "momentum": self.momentum}

    @staticmethod
    def from_dict(d):
        return OptimizerConfig(
            name=d.get("name", "adam"), lr=float(d.get("lr", 1e-3)),
            momentum=float(d.get("momentum", 0.9)),
        )


@dataclass(frozen=True)
class TrainConfig:
    dataset: str
    out_dir: str
    mode: str = "weak"
    eval_dataset: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 5
    arch: M.ArchDescriptor | None = None
    pos_sources: tuple | None = None
    neg_sources: tuple | None = None
    strong_ids: tuple | None = None
    transition: dict = field(default_factory=lambda: {"mode": "uniform"})
    freeze_identity_cms: bool = False
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if self.mode == "semi" and not self.strong_ids:
            raise ConfigError("semi mode requires strong_ids")

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "out_dir": self.out_dir,
            "mode": self.mode,
            "eval_dataset": self.eval_dataset,
            "loss": self.loss.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "arch": self.arch.to_dict() if self.arch else None,
            "pos_sources": list(self.pos_sources) if self.pos_sources else None,
            "neg_sources": list(self.neg_sources) if self.neg_sources else None,
            "strong_ids": list(self.strong_ids) if self.strong_ids else None,
            "transition": self.transition,
            "freeze_identity_cms": self.freeze_identity_cms,
            "deterministic": self.deterministic,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            dataset=d["dataset"],
            out_dir=d["out_dir"],
            mode=d.get("mode", "weak"),
            eval_dataset=d.get("eval_dataset"),
            loss=LossConfig.from_dict(d.get("loss", {})),
            optimizer=OptimizerConfig.from_dict(d.get("optimizer", {})),
            epochs=int(d.get("epochs", 20)),
            batch_size=int(d.get("batch_size", 32)),
            seed=int(d.get("seed", 0)),
            eval_every=int(d.get("eval_every", 5)),
            arch=M.ArchDescriptor.from_dict(d["arch"]) if d.get("arch") else None,
            pos_sources=tuple(d["pos_sources"]) if d.get("pos_sources") else None,
            neg_sources=tuple(d["neg_sources"]) if d.get("neg_sources") else None,
            strong_ids=tuple(d["strong_ids"]) if d.get("strong_ids") else None,
            transition=d.get("transition", {"mode": "uniform"}),
            freeze_identity_cms=bool(d.get("freeze_identity_cms", False)),
            deterministic=bool(d.get("deterministic", True)),
        )


@dataclass
class RunArtifacts:
    out_dir: str
    metrics_path: str
    report_path: str
    report: dict
    checkpoints: list
    params: M.ModelParams


# ---------------------------------------------------------------------------
# optimizers (parameter dicts in, parameter dicts out)
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, cfg: OptimizerConfig, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = cfg.lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, tensors: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1 - self.b1 ** self.t
        b2t = 1 - self.b2 ** self.t
        for k, g in grads.items():
            p = tensors[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            g = g.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        out = {"t": np.array(self.t, dtype=np.int64)}
        for k, v in self.m.items():
            out[f"m/{k}"] = v
        for k, v in self.v.items():
            out[f"v/{k}"] = v
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state.get("t", 0))
        for k, v in state.items():
            if k.startswith("m/"):
                self.m[k[2:]] = v.copy()
            elif k.startswith("v/"):
                self.v[k[2:]] = v.copy()


class SGD:
    def __init__(self, cfg: OptimizerConfig):
        self.lr, self.momentum = cfg.lr, cfg.momentum
        self.vel: dict = {}

    def step(self, tensors: dict, grads: dict) -> None:
        for k, g in grads.items():
            p = tensors[k]
            g = g.astype(p.dtype, copy=False)
            v = self.vel.setdefault(k, np.zeros_like(p))
            v *= self.momentum
            v += g
            p -= self.lr * v

    def state(self) -> dict:
        out = {"t": np.array(0, dtype=np.int64)}
        for k, v in self.vel.items():
            out[f"vel/{k}"] = v
        return out

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            if k.startswith("vel/"):
                self.vel[k[4:]] = v.copy()


def make_optimizer(cfg: OptimizerConfig):
    return Adam(cfg) if cfg.name == "adam" else SGD(cfg)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

class _Tensors:
    """Dataset flattened into training arrays (one-time cost per run)."""

    def __init__(self, ds: SegDataset, cfg: TrainConfig, dtype):
        self.L = ds.space.num_classes
        n = len(ds.samples)
        if n == 0:
            raise ConfigError("dataset is empty")
        h, w = ds.samples[0].gt_label.shape
        self.ids = [s.id for s in ds.samples]
        self.P = h * w
        self.hw = (h, w)
        self.x = np.zeros((n, h, w, 1), dtype=dtype)
        self.gt = np.zeros((n, self.P), dtype=np.uint8)
        for i, s in enumerate(ds.samples):
            img = s.image if s.image.ndim == 3 else s.image[:, :, None]
            self.x[i] = img.astype(dtype)
            self.gt[i] = s.gt_label.reshape(-1)

        def build(kind_attr, wanted):
            names = sorted({cm.source or "" for s in ds.samples for cm in getattr(s, kind_attr)})
            if wanted is not None:
                names = [nm for nm in names if nm in wanted]
            slots, present = [], []
            for nm in names:
                arr = np.full((n, self.P), IGNORE, dtype=np.uint8)
                pres = np.zeros(n, dtype=bool)
                for i, s in enumerate(ds.samples):
                    for cm in getattr(s, kind_attr):
                        if (cm.source or "") == nm:
                            arr[i] = cm.labels.reshape(-1)
                            pres[i] = True
                slots.append(arr)
                present.append(pres)
            return slots, present

        self.pos_slots, self.pos_present = build("pos_coarse", cfg.pos_sources)
        self.neg_slots, self.neg_present = build("neg_coarse", cfg.neg_sources)
        self.strong_mask = np.zeros(n, dtype=bool)
        if cfg.strong_ids:
            wanted = set(cfg.strong_ids)
            for i, sid in enumerate(self.ids):
                if sid in wanted:
                    self.strong_mask[i] = True
            missing = wanted - set(self.ids)
            if missing:
                raise ConfigError(f"strong_ids not in dataset: {sorted(missing)[:5]}")


def _validate_mode(t: _Tensors, cfg: TrainConfig) -> None:
    has_coarse = any(p.any() for p in t.pos_present) or any(p.any() for p in t.neg_present)
    if cfg.mode in ("weak", "semi") and not has_coarse:
        raise ConfigError(f"mode={cfg.mode} requires coarse annotation sources")
    if cfg.mode == "semi" and t.strong_mask.all():
        raise ConfigError("semi mode requires at least one coarse-only sample")


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------

def _step_loss(params, x, t: _Tensors, idx, cfg: TrainConfig, m_values, lam, compute_grads=True):
    """Forward + loss (+ gradients) for one batch of sample indices."""
    B = len(idx)
    p, seg_cache = M.seg_forward_batch(params, x)
    Bv, H, W, L = p.shape
    p2 = p.reshape(B, t.P, L)

    w_obj, w_comp = cfg.loss.branch_weights
    weak_rows = ~t.strong_mask[idx] if cfg.mode == "semi" else np.ones(B, dtype=bool)

    need_cm = (
        cfg.mode in ("weak", "semi")
        and not cfg.freeze_identity_cms
        and (t.pos_slots or (t.neg_slots and w_comp > 0))
    )
    a_obj = a_comp = None
    ann_cache = None
    if need_cm:
        branches = []
        if t.pos_slots and w_obj > 0:
            branches.append("objective")
        if t.neg_slots and w_comp > 0:
            branches.append("complementary")
        if branches:
            amaps, ann_cache = M.ann_forward_batch(params, x, branches=branches)
            if "objective" in amaps:
                a_obj = amaps["objective"].reshape(B, t.P, L, L)
            if "complementary" in amaps:
                a_comp = amaps["complementary"].reshape(B, t.P, L, L)

    gp_total = np.zeros_like(p2)
    breakdown = None

    if cfg.mode in ("weak", "semi"):
        obj_t = BranchTargets(
            targets=[s[idx] for s in t.pos_slots],
            present=[pr[idx] & weak_rows for pr in t.pos_present],
        )
        comp_t = BranchTargets(
            targets=[s[idx] for s in t.neg_slots],
            present=[pr[idx] & weak_rows for pr in t.neg_present],
        )
        breakdown, gp, ga_obj, ga_comp = batch_terms(
            p2, a_obj, a_comp, m_values, obj_t, comp_t, lam,
            (w_obj, w_comp), cfg.loss.eps,
        )
        gp_total += gp
        if compute_grads and ann_cache is not None and (ga_obj is not None or ga_comp is not None):
            gA = {}
            if ga_obj is not None:
                gA["objective"] = ga_obj.reshape(B, H, W, L, L)
            if ga_comp is not None:
                gA["complementary"] = ga_comp.reshape(B, H, W, L, L)
        else:
            gA = {}
    else:
        gA = {}

    if cfg.mode in ("strong", "semi"):
        gt_t = t.gt[idx].copy()
        if cfg.mode == "semi":
            gt_t[weak_rows] = IGNORE  # mask-supervised rows only
        strong_t = BranchTargets(
            targets=[gt_t],
            present=[t.strong_mask[idx] if cfg.mode == "semi" else np.ones(B, dtype=bool)],
        )
        sb, gp, _, _ = batch_terms(
            p2, None, None, None, strong_t, BranchTargets([], []), 0.0, (1.0, 0.0), cfg.loss.eps,
        )
        gp_total += gp
        if breakdown is None:
            breakdown = sb
        else:
            breakdown.ce_obj += sb.ce_obj
            breakdown.total += sb.total
            breakdown.pixel_counts["ce_obj"] += sb.pixel_counts["ce_obj"]

    grads: dict = {}
    if compute_grads:
        M.seg_backward(params, seg_cache, gp_total.reshape(Bv, H, W, L), grads)
        if gA and ann_cache is not None:
            M.ann_backward(params, ann_cache, gA, grads)
    return breakdown, grads


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------

def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def _metrics_row(epoch, split, miou, breakdown, lam):
    row = {"epoch": epoch, "split": split, "miou": miou}
    row.update(breakdown.to_metrics() if breakdown is not None else {
        "loss_total": 0.0, "ce_obj": 0.0, "trace_obj": 0.0, "ce_comp": 0.0, "trace_comp": 0.0,
    })
    row["lambda"] = lam
    return row


def _mean_breakdown(parts):
    from .loss import LossBreakdown

    n = len(parts)
    out = LossBreakdown(
        total=sum(b.total for b in parts) / n,
        ce_obj=sum(b.ce_obj for b in parts) / n,
        trace_obj=sum(b.trace_obj for b in parts) / n,
        ce_comp=sum(b.ce_comp for b in parts) / n,
        trace_comp=sum(b.trace_comp for b in parts) / n,
    )
    return out


def train(cfg: TrainConfig, params: M.ModelParams | None = None,
          optimizer=None, start_epoch: int = 0, metrics_mode: str = "w") -> RunArtifacts:
    """Run (or continue) a training loop per the config; returns artifacts."""
    ds = load_dataset(cfg.dataset)
    arch = cfg.arch or M.ArchDescriptor(num_classes=ds.space.num_classes)
    if arch.num_classes != ds.space.num_classes:
        raise ConfigError(
            f"arch num_classes={arch.num_classes} but dataset has {ds.space.num_classes}"
        )
    cfg = replace(cfg, arch=arch)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_json(out / "config.json", cfg.to_dict())

    t = _Tensors(ds, cfg, arch.np_dtype)
    _validate_mode(t, cfg)
    eval_ds = load_dataset(cfg.eval_dataset) if cfg.eval_dataset else None

    if params is None:
        params = M.init_params(arch, cfg.seed)
    if optimizer is None:
        optimizer = make_optimizer(cfg.optimizer)
    m_values = None
    if cfg.transition.get("mode", "uniform") == "uniform":
        m_values = M.build_transition_matrix(arch.num_classes, "uniform").values
    else:
        m_values = M.build_transition_matrix(
            arch.num_classes, "custom", cfg.transition.get("values")
        ).values

    n = len(t.ids)
    metrics_path = out / "metrics.jsonl"
    mf = open(metrics_path, metrics_mode)
    checkpoints: list = []
    best = {"miou": -1.0, "ckpt": None}

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lam = cfg.loss.effective_lam(epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            parts = []
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                x = t.x[idx]
                breakdown, grads = _step_loss(params, x, t, idx, cfg, m_values, lam)
                if not np.isfinite(breakdown.total):
                    dump = {
                        "epoch": epoch,
                        "batch_ids": [t.ids[int(i)] for i in idx],
                        "breakdown": breakdown.to_metrics(),
                    }
                    _atomic_json(out / "nan_batch.json", dump)
                    raise TrainError(
                        f"non-finite loss at epoch {epoch}; offending batch dumped to nan_batch.json"
                    )
                optimizer.step(params.tensors, grads)
                parts.append(breakdown)
            train_bd = _mean_breakdown(parts)
            mf.write(json.dumps(_metrics_row(epoch, "train", None, train_bd, lam)) + "\n")
            mf.flush()

            is_eval = ((epoch + 1) % cfg.eval_every == 0) or (epoch == cfg.epochs - 1)
            if is_eval:
                ck = out / f"ckpt_ep{epoch:04d}.npz"
                M.save_checkpoint(ck, params, {"epoch": epoch, "mode": cfg.mode},
                                  optimizer.state())
                checkpoints.append(str(ck))
                if eval_ds is not None:
                    rep = evalmod.evaluate(params, eval_ds)
                    val_bd = _eval_loss(params, eval_ds, cfg, m_values, lam)
                    mf.write(json.dumps(
                        _metrics_row(epoch, "val", rep.miou, val_bd, lam)) + "\n")
                    mf.flush()
                    if rep.miou > best["miou"]:
                        best = {"miou": rep.miou, "ckpt": str(ck)}
    finally:
        mf.close()

    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "epochs_run": cfg.epochs,
        "checkpoints": checkpoints,
        "best_checkpoint": best["ckpt"] or (checkpoints[-1] if checkpoints else None),
        "best_val_miou": best["miou"] if best["ckpt"] else None,
        "final_checkpoint": checkpoints[-1] if checkpoints else None,
    }
    _atomic_json(out / "report.json", report)
    return RunArtifacts(str(out), str(metrics_path), str(out / "report.json"),
                        report, checkpoints, params)


def _eval_loss(params, eval_ds, cfg, m_values, lam):
    """Forward-only loss on the eval split (same mode semantics, no grads)."""
    t = _Tensors(eval_ds, cfg, params.arch.np_dtype)
    parts = []
    n = len(t.ids)
    for lo in range(0, n, max(cfg.batch_size, 64)):
        idx = np.arange(lo, min(lo + max(cfg.batch_size, 64), n))
        bd, _ = _step_loss(params, t.x[idx], t, idx, replace(cfg, mode=_eval_mode(cfg, t)),
                           m_values, lam, compute_grads=False)
        parts.append(bd)
    return _mean_breakdown(parts)


def _eval_mode(cfg, t: _Tensors) -> str:
    # semi eval splits carry no strong/weak partition: fall back to strong CE
    if cfg.mode == "semi":
        return "strong"
    if cfg.mode == "weak" and not (t.pos_slots or t.neg_slots):
        return "strong"
    return cfg.mode


def resume(checkpoint: str, cfg: TrainConfig) -> RunArtifacts:
    """Continue training from a checkpoint; appends to the same metrics file."""
    params, meta, opt_state = M.load_checkpoint(checkpoint)
    if cfg.arch is not None and cfg.arch.to_dict() != meta["arch"]:
        diff = {
            k: (meta["arch"].get(k), cfg.arch.to_dict().get(k))
            for k in set(meta["arch"]) | set(cfg.arch.to_dict())
            if meta["arch"].get(k) != cfg.arch.to_dict().get(k)
        }
        raise ConfigError(f"architecture descriptor mismatch (ckpt vs config): {diff}")
    cfg = replace(cfg, arch=params.arch)
    done = int(meta.get("epoch", -1)) + 1
    if done >= cfg.epochs:
        print(f"warning: checkpoint already at epoch {done}; nothing to resume", file=sys.stderr)
        report_path = Path(cfg.out_dir) / "report.json"
        report = {"resume_warning": f"checkpoint epoch {done} >= epochs {cfg.epochs}"}
        if report_path.exists():
            report = {**json.loads(report_path.read_text()), **report}
        _atomic_json(report_path, report)
        return RunArtifacts(cfg.out_dir, str(Path(cfg.out_dir) / "metrics.jsonl"),
                            str(report_path), report, [checkpoint], params)
    optimizer = make_optimizer(cfg.optimizer)
    optimizer.load_state(opt_state)
    return train(cfg, params=params, optimizer=optimizer, start_epoch=done, metrics_mode="a")


def ablation_suite(base_cfg: TrainConfig, seeds=(0, 1, 2)) -> dict:
    """Full vs w/o-negative vs naive CE, shared data and seed list.

    Returns {"rows": [...], "arms": {...}} and writes ablation.json under the
    base out_dir; each row carries (arm, seed, final test mIoU).
    """
    arms = {
        "full": lambda c: c,
        "wo_negative": lambda c: replace(
            c, loss=replace(c.loss, branch_weights=(c.loss.branch_weights[0], 0.0))
        ),
        "naive": lambda c: replace(
            c,
            freeze_identity_cms=True,
            loss=replace(c.loss, lam=0.0, branch_weights=(c.loss.branch_weights[0], 0.0)),
        ),
    }
    out_root = Path(base_cfg.out_dir)
    rows = []
    summary = {}
    for arm, tweak in arms.items():
        mious = []
        for seed in seeds:
            cfg = tweak(replace(
                base_cfg, seed=seed, out_dir=str(out_root / f"{arm}_seed{seed}")
            ))
            art = train(cfg)
            miou = _final_val_miou(art)
            rows.append({"arm": arm, "seed": seed, "miou": miou})
            mious.append(miou)
        summary[arm] = {
            "per_seed": mious,
            "mean": float(np.mean(mious)),
            "std": float(np.std(mious)),
        }
    result = {"rows": rows, "arms": summary, "seeds": list(seeds)}
    out_root.mkdir(parents=True, exist_ok=True)
    _atomic_json(out_root / "ablation.json", result)
    return result


def _final_val_miou(art: RunArtifacts) -> float:
    rows = [json.loads(line) for line in Path(art.metrics_path).read_text().splitlines()]
    vals = [r["miou"] for r in rows if r["split"] == "val" and r["miou"] is not None]
    if not vals:
        raise TrainError("no validation mIoU rows; set eval_dataset in the config")
    return float(vals[-1])
