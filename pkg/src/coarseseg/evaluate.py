"""Evaluation: mean IoU against consensus labels, annotation-quality
sensitivity sweep, and diagnostic panel export.

mIoU convention: IoU per class over non-IGNORE gt pixels; classes absent
from both prediction and ground truth are excluded from the mean (their
IoU is reported as None). The split-level mIoU uses class counts pooled
over all images; a per-image mIoU list is reported alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .datasets import IGNORE, SegDataset, SegSample

FN_COLOR = (255, 255, 0)   # yellow
FP_COLOR = (255, 0, 0)     # red
TP_COLOR = (255, 255, 255)
TN_COLOR = (0, 0, 0)


class EmptyEvalError(ValueError):
    """No evaluable (non-IGNORE) pixels."""


@dataclass
class EvalReport:
    per_class_iou: list
    miou: float
    per_image_miou: list
    dataset_id: str
    checkpoint_id: str
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "per_image_miou": self.per_image_miou,
            "dataset_id": self.dataset_id,
            "checkpoint_id": self.checkpoint_id,
            "num_classes": self.num_classes,
        }


def _iou_counts(pred: np.ndarray, gt: np.ndarray, L: int):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != IGNORE
    if not valid.any():
        raise EmptyEvalError("ground truth is entirely IGNORE")
    inter = np.zeros(L, dtype=np.int64)
    union = np.zeros(L, dtype=np.int64)
    pv = pred[valid]
    gv = gt[valid]
    for c in range(L):
        pc = pv == c
        gc = gv == c
        inter[c] = np.count_nonzero(pc & gc)
        union[c] = np.count_nonzero(pc | gc)
    return inter, union


def _iou_from_counts(inter: np.ndarray, union: np.ndarray):
    per_class = [
        (float(i) / float(u)) if u > 0 else None for i, u in zip(inter, union)
    ]
    present = [v for v in per_class if v is not None]
    if not present:
        raise EmptyEvalError("no class present in either map")
    return per_class, float(np.mean(present))


def miou(pred: np.ndarray, gt: np.ndarray, L: int):
    """Per-class IoU and mean IoU for one label-map pair.

    Returns (per_class list with None for classes absent from both, miou).
    """
    inter, union = _iou_counts(np.asarray(pred), np.asarray(gt), L)
    return _iou_from_counts(inter, union)


def predict_labels(params: M.ModelParams, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Argmax segmentation labels [N,H,W] for a stack of images [N,H,W,(C)]."""
    if images.ndim == 3:
        images = images[:, :, :, None]
    outs = []
    for lo in range(0, len(images), batch_size):
        p, _ = M.seg_forward_batch(params, images[lo:lo + batch_size])
        outs.append(p.argmax(axis=3).astype(np.uint8))
    return np.concatenate(outs, axis=0)


def _as_params(checkpoint) -> tuple:
    if isinstance(checkpoint, M.ModelParams):
        return checkpoint, "<in-memory>"
    params, _, _ = M.load_checkpoint(checkpoint)
    return params, str(checkpoint)


def evaluate(checkpoint, dataset: SegDataset, batch_size: int = 128) -> EvalReport:
    """Aggregate mIoU of argmax segmentation over a dataset split."""
    params, ckpt_id = _as_params(checkpoint)
    L = dataset.space.num_classes
    if params.arch.num_classes != L:
        raise ValueError(
            f"checkpoint has L={params.arch.num_classes}, dataset has L={L}"
        )
    images = np.stack([
        s.image if s.image.ndim == 3 else s.image[:, :, None] for s in dataset.samples
    ])
    preds = predict_labels(params, images, batch_size)
    inter = np.zeros(L, dtype=np.int64)
    union = np.zeros(L, dtype=np.int64)
    per_image = []
    for pred, s in zip(preds, dataset.samples):
        i, u = _iou_counts(pred, s.gt_label, L)
        inter += i
        union += u
        _, im_miou = _iou_from_counts(i, u)
        per_image.append(im_miou)
    per_class, pooled = _iou_from_counts(inter, union)
    return EvalReport(
        per_class_iou=per_class,
        miou=pooled,
        per_image_miou=per_image,
        dataset_id=dataset.split_tag,
        checkpoint_id=ckpt_id,
        num_classes=L,
    )


# ---------------------------------------------------------------------------
# sensitivity sweep over annotation-quality levels
# ---------------------------------------------------------------------------

def sensitivity_sweep(base_cfg, levels, seeds=(0, 1, 2), source_template="synthL{level}") -> dict:
    """One full train+eval per (level, seed); table sorted by level.

    The dataset must already contain coarse sources named per
    source_template (the `noise synth` command writes them that way).
    """
    from . import train as trainmod

    levels = sorted(levels)
    if not levels or any(not 1 <= k <= 5 for k in levels):
        raise ValueError("levels must be a non-empty subset of 1..5")
    out_root = Path(base_cfg.out_dir)
    rows = []
    summary = {}
    for level in levels:
        src = (source_template.format(level=level),)
        mious = []
        for seed in seeds:
            from dataclasses import replace

            cfg = replace(
                base_cfg, seed=seed, pos_sources=src, neg_sources=src,
                out_dir=str(out_root / f"level{level}_seed{seed}"),
            )
            art = trainmod.train(cfg)
            v = trainmod._final_val_miou(art)
            rows.append({"level": level, "seed": seed, "miou": v})
            mious.append(v)
        summary[str(level)] = {
            "per_seed": mious,
            "mean": float(np.mean(mious)),
            "std": float(np.std(mious)),
        }
    result = {"rows": rows, "levels": summary, "seeds": list(seeds)}
    out_root.mkdir(parents=True, exist_ok=True)
    tmp = out_root / "sweep.json.tmp"
    tmp.write_text(json.dumps(result, indent=2, sort_keys=True))
    import os

    os.replace(tmp, out_root / "sweep.json")
    return result


# ---------------------------------------------------------------------------
# diagnostic panels
# ---------------------------------------------------------------------------

def error_colors(pred: np.ndarray, gt: np.ndarray, positive_class: int = 1) -> np.ndarray:
    """4-color error image: white TP, yellow FN, red FP, black TN."""
    p = np.asarray(pred) == positive_class
    g = np.asarray(gt) == positive_class
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & g] = TP_COLOR
    out[~p & g] = FN_COLOR
    out[p & ~g] = FP_COLOR
    out[~p & ~g] = TN_COLOR
    return out


def export_panels(checkpoint, sample: SegSample, out_path, transition=None,
                  positive_class: int | None = None) -> dict:
    """Write the diagnostic grid PNG for one sample; returns the panel arrays.

    Panels: input, gt, predicted labels, given/reconstructed positive coarse,
    given negative coarse and its v-prediction, CM-diagonal heatmaps for both
    branches, the transition matrix, and the 4-color error panel.
    """
    params, _ = _as_params(checkpoint)
    L = params.arch.num_classes
    m = transition if transition is not None else M.build_transition_matrix(L, "uniform")
    image = sample.image if sample.image.ndim == 3 else sample.image[:, :, None]

    p = M.seg_forward(params, image)
    a_obj = M.cm_forward(params, image, "objective")
    a_comp = M.cm_forward(params, image, "complementary")
    y_obj = M.noisy_prediction(a_obj, p)
    u = M.noisy_prediction(a_comp, p)
    v = M.complementary_prediction(m, u)
    pred = p.argmax(axis=-1).astype(np.uint8)
    if positive_class is None:
        fg = sample.gt_label[(sample.gt_label != IGNORE) & (sample.gt_label != 0)]
        positive_class = int(fg.max()) if fg.size else 1

    pos_given = sample.pos_coarse[0].labels if sample.pos_coarse else np.full_like(pred, IGNORE)
    neg_given = sample.neg_coarse[0].labels if sample.neg_coarse else np.full_like(pred, IGNORE)

    panels = {
        "input": image[:, :, 0],
        "gt": sample.gt_label,
        "pred": pred,
        "pos_given": pos_given,
        "pos_reconstructed": y_obj.argmax(axis=-1).astype(np.uint8),
        "neg_given": neg_given,
        "neg_predicted": v.argmax(axis=-1).astype(np.uint8),
        "cm_diag_obj": np.trace(a_obj, axis1=-2, axis2=-1) / L,
        "cm_diag_comp": np.trace(a_comp, axis1=-2, axis2=-1) / L,
        "transition": m.values if isinstance(m, M.TransitionMatrix) else np.asarray(m),
        "error": error_colors(pred, sample.gt_label, positive_class),
    }
    _render_grid(panels, out_path, L)
    return panels


def _render_grid(panels: dict, out_path, L: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    titles = {
        "input": "input", "gt": "ground truth", "pred": "estimated labels",
        "pos_given": "positive coarse (given)",
        "pos_reconstructed": "positive coarse (model)",
        "neg_given": "negative coarse (given)",
        "neg_predicted": "negative coarse (model v)",
        "cm_diag_obj": "CM diagonal (objective)",
        "cm_diag_comp": "CM diagonal (complementary)",
        "transition": "transition matrix",
        "error": "error map",
    }
    fig, axes = plt.subplots(3, 4, figsize=(12, 9), dpi=100)
    order = list(titles)
    for ax, key in zip(axes.flat, order):
        arr = panels[key]
        if key == "error":
            ax.imshow(arr)
        elif key == "transition":
            ax.imshow(arr, cmap="viridis", vmin=0, vmax=1)
        elif key in ("cm_diag_obj", "cm_diag_comp", "input"):
            ax.imshow(arr, cmap="gray", vmin=0, vmax=1)
        else:
            shown = np.ma.masked_equal(arr.astype(float), IGNORE)
            ax.imshow(shown, cmap="viridis", vmin=0, vmax=max(L - 1, 1))
        ax.set_title(titles[key], fontsize=9)
        ax.axis("off")
    for ax in axes.flat[len(order):]:
        ax.axis("off")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
