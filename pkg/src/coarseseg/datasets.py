"""Segmentation datasets: build from raw digit images, persist, load, split.

On-disk layout (all label PNGs are 8-bit class indices, 255 = IGNORE):

    root/manifest.json   {"version": 1, "num_classes": L, "class_names": [...],
                          "samples": [{"id": s, "pos_sources": [...],
                                       "neg_sources": [...]}],
                          "split_tag": "train"}        # split_tag optional
    root/images/{id}.png          8-bit grayscale (or RGB)
    root/labels/{id}.png
    root/coarse_pos/{source}/{id}.png
    root/coarse_neg/{source}/{id}.png

Images are stored as 8-bit PNG, so in-memory intensities are quantized to
the 1/255 grid at build time; save/load round-trips are then bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE = 255

POSITIVE = "positive"
NEGATIVE = "negative"


class DatasetError(ValueError):
    """Invalid dataset contents or on-disk format."""


class EmptyDatasetError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelSpace:
    num_classes: int
    class_names: tuple

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if len(self.class_names) != self.num_classes:
            raise DatasetError("class_names length must equal num_classes")
        if len(set(self.class_names)) != self.num_classes:
            raise DatasetError("class_names must be unique")


@dataclass
class CoarseMap:
    """A coarse annotation map.

    kind=positive: dense noisy mask, marked pixels carry the object class.
    kind=negative: non-IGNORE value c at a pixel asserts "this pixel is NOT
    class c"; pixels without strokes are IGNORE.
    """

    labels: np.ndarray
    kind: str
    source: str | None = None

    def __post_init__(self):
        if self.kind not in (POSITIVE, NEGATIVE):
            raise DatasetError(f"kind must be positive/negative, got {self.kind!r}")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise DatasetError("coarse labels must be a 2-D map")


@dataclass
class SegSample:
    id: str
    image: np.ndarray            # [H,W] or [H,W,C] float32 in [0,1]
    gt_label: np.ndarray         # [H,W] uint8 (IGNORE allowed)
    pos_coarse: list = field(default_factory=list)
    neg_coarse: list = field(default_factory=list)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.gt_label = np.asarray(self.gt_label, dtype=np.uint8)
        hw = self.gt_label.shape
        if self.image.shape[:2] != hw:
            raise DatasetError(f"sample {self.id}: image/label shape mismatch")
        for cm in list(self.pos_coarse) + list(self.neg_coarse):
            if cm.labels.shape != hw:
                raise DatasetError(f"sample {self.id}: coarse map shape mismatch")


@dataclass
class SegDataset:
    space: LabelSpace
    samples: list
    split_tag: str = "train"

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids must be unique")
        self.validate_labels()

    def validate_labels(self):
        L = self.space.num_classes
        for s in self.samples:
            for name, arr in (("gt", s.gt_label),) + tuple(
                (f"coarse[{cm.kind}]", cm.labels) for cm in s.pos_coarse + s.neg_coarse
            ):
                vals = arr[arr != IGNORE]
                if vals.size and vals.max() >= L:
                    raise DatasetError(
                        f"sample {s.id}: {name} contains class {int(vals.max())} >= L={L}"
                    )

    def __len__(self):
        return len(self.samples)

    def by_id(self, sid: str) -> SegSample:
        for s in self.samples:
            if s.id == sid:
                return s
        raise KeyError(sid)


# ---------------------------------------------------------------------------
# building from raw digits
# ---------------------------------------------------------------------------

def quantize_unit(img: np.ndarray) -> np.ndarray:
    """Snap unit-interval intensities to the 1/255 grid used on disk."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def build_mnist_seg(raw_digits, mode: str = "binary", threshold: float = 0.5) -> SegDataset:
    """Derive a segmentation dataset by thresholding digit images.

    raw_digits: iterable of (28x28 unit-interval grayscale image, digit class).
    binary mode: L=2, foreground where intensity > threshold.
    multiclass mode: L=11, foreground pixels get class digit+1.
    """
    if mode not in ("binary", "multiclass"):
        raise DatasetError(f"mode must be binary/multiclass, got {mode!r}")
    if not (0.0 < threshold < 1.0):
        raise DatasetError("threshold must lie strictly inside (0, 1)")
    raw = list(raw_digits)
    if not raw:
        raise EmptyDatasetError("no input digits")
    if mode == "binary":
        space = LabelSpace(2, ("background", "foreground"))
    else:
        space = LabelSpace(11, ("background",) + tuple(f"digit{d}" for d in range(10)))
    samples = []
    for i, (img, digit) in enumerate(raw):
        img = np.asarray(img, dtype=np.float32)
        if img.shape != (28, 28):
            raise DatasetError(f"digit {i}: expected 28x28 image, got {img.shape}")
        if not (0 <= int(digit) <= 9):
            raise DatasetError(f"digit {i}: class {digit} outside 0..9")
        img = quantize_unit(img)
        fg = img > threshold
        cls = 1 if mode == "binary" else int(digit) + 1
        gt = np.where(fg, np.uint8(cls), np.uint8(0))
        samples.append(SegSample(id=f"{i:05d}_{int(digit)}", image=img, gt_label=gt))
    return SegDataset(space, samples)


# ---------------------------------------------------------------------------
# raw digit providers
# ---------------------------------------------------------------------------

_BASE_SPLIT_SEED = 0  # fixed: the train/test partition of the base digits is stable


def synth_digit_images(count: int, seed: int, subset: str = "train"):
    """28x28 digit images synthesized from sklearn's 8x8 load_digits corpus.

    Bases are partitioned once (seeded by a fixed constant) into train/test
    pools so samples drawn for different subsets never share a base digit.
    Each sample upsamples one base bilinearly and applies a small seeded
    affine jitter (shift/rotation/scale). Returns [(image, digit), ...].
    """
    from scipy import ndimage as ndi
    from sklearn.datasets import load_digits

    if subset not in ("train", "test", "all"):
        raise DatasetError(f"subset must be train/test/all, got {subset!r}")
    digits = load_digits()
    n_bases = len(digits.images)
    order = np.random.default_rng(_BASE_SPLIT_SEED).permutation(n_bases)
    cut = int(0.8 * n_bases)
    pool = {"train": order[:cut], "test": order[cut:], "all": order}[subset]

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        bi = int(pool[rng.integers(len(pool))])
        base = digits.images[bi] / 16.0
        img = ndi.zoom(base, 28 / 8, order=1)[:28, :28]
        angle = rng.uniform(-12, 12)
        scale = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-2, 2, size=2)
        c = np.array(img.shape) / 2 - 0.5
        mat = np.array([[np.cos(np.deg2rad(angle)), -np.sin(np.deg2rad(angle))],
                        [np.sin(np.deg2rad(angle)), np.cos(np.deg2rad(angle))]]) / scale
        img = ndi.affine_transform(img, mat, offset=c - mat @ c + shift, order=1, cval=0.0)
        out.append((np.clip(img, 0, 1).astype(np.float32), int(digits.target[bi])))
    return out


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX3 image file (the standard MNIST container) to [N,28,28] in [0,1]."""
    with open(path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 2051:
            raise DatasetError(f"{path}: bad IDX3 magic {magic}")
        data = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    return (data.reshape(n, rows, cols) / 255.0).astype(np.float32)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != 2049:
            raise DatasetError(f"{path}: bad IDX1 magic {magic}")
        return np.frombuffer(f.read(n), dtype=np.uint8).copy()


def mnist_digit_images(raw_dir, subset: str = "train", count: int | None = None):
    """Load (image, digit) pairs from standard MNIST IDX files under raw_dir."""
    prefix = {"train": "train", "test": "t10k"}.get(subset)
    if prefix is None:
        raise DatasetError(f"subset must be train/test, got {subset!r}")
    raw_dir = Path(raw_dir)
    images = read_idx_images(raw_dir / f"{prefix}-images-idx3-ubyte")
    labels = read_idx_labels(raw_dir / f"{prefix}-labels-idx1-ubyte")
    n = len(images) if count is None else min(count, len(images))
    return [(images[i], int(labels[i])) for i in range(n)]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.png")
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def _image_to_u8(img: np.ndarray, sid: str) -> np.ndarray:
    scaled = img * 255.0
    u8 = np.round(scaled)
    if not np.allclose(scaled, u8, atol=1e-3):
        raise DatasetError(
            f"sample {sid}: image is not on the 1/255 grid; quantize before saving"
        )
    return u8.astype(np.uint8)


def save_dataset(ds: SegDataset, root) -> dict:
    """Persist a dataset; returns a manifest summary dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        _write_png(root / "images" / f"{s.id}.png", _image_to_u8(s.image, s.id))
        _write_png(root / "labels" / f"{s.id}.png", s.gt_label)
        pos_names, neg_names = [], []
        for i, cm in enumerate(s.pos_coarse):
            name = cm.source or f"pos{i}"
            pos_names.append(name)
            _write_png(root / "coarse_pos" / name / f"{s.id}.png", cm.labels)
        for i, cm in enumerate(s.neg_coarse):
            name = cm.source or f"neg{i}"
            neg_names.append(name)
            _write_png(root / "coarse_neg" / name / f"{s.id}.png", cm.labels)
        entries.append({"id": s.id, "pos_sources": pos_names, "neg_sources": neg_names})
    manifest = {
        "version": 1,
        "num_classes": ds.space.num_classes,
        "class_names": list(ds.space.class_names),
        "samples": entries,
        "split_tag": ds.split_tag,
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, root / "manifest.json")
    return {"root": str(root), "num_samples": len(entries), "num_classes": ds.space.num_classes}


def _read_png(path: Path, sid: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"sample {sid}: referenced file missing: {path}")
    return np.asarray(Image.open(path))


def load_dataset(root) -> SegDataset:
    """Load a dataset saved by save_dataset; validates labels against L."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != 1:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    space = LabelSpace(int(manifest["num_classes"]), tuple(manifest["class_names"]))
    samples = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        img = _read_png(root / "images" / f"{sid}.png", sid)
        image = (img / 255.0).astype(np.float32)
        gt = _read_png(root / "labels" / f"{sid}.png", sid).astype(np.uint8)
        pos, neg = [], []
        for name in entry.get("pos_sources", []):
            arr = _read_png(root / "coarse_pos" / name / f"{sid}.png", sid)
            pos.append(CoarseMap(arr, POSITIVE, source=name))
        for name in entry.get("neg_sources", []):
            arr = _read_png(root / "coarse_neg" / name / f"{sid}.png", sid)
            neg.append(CoarseMap(arr, NEGATIVE, source=name))
        samples.append(SegSample(sid, image, gt, pos, neg))
    return SegDataset(space, samples, split_tag=manifest.get("split_tag", "train"))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

_SPLIT_TAGS = {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}


def split(ds: SegDataset, fractions, seed: int):
    """Deterministic disjoint partition by seeded shuffle.

    Sizes use largest-remainder rounding so they sum to len(ds) exactly.
    """
    fr = [float(f) for f in fractions]
    if not fr or any(f < 0 for f in fr):
        raise DatasetError("fractions must be non-negative")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1 (got {sum(fr)})")
    n = len(ds.samples)
    exact = [f * n for f in fr]
    sizes = [int(np.floor(e)) for e in exact]
    rema = sorted(range(len(fr)), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[rema[i % len(fr)]] += 1
    order = np.random.default_rng(seed).permutation(n)
    tags = _SPLIT_TAGS.get(len(fr), tuple(f"part{i}" for i in range(len(fr))))
    out, pos = [], 0
    for k, size in enumerate(sizes):
        chosen = sorted(order[pos:pos + size])
        part = [ds.samples[int(i)] for i in chosen]
        out.append(SegDataset(ds.space, part, split_tag=tags[k]))
        pos += size
    return out
