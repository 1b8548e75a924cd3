"""Synthetic coarse noisy annotations from ground-truth masks.

Positive coarse maps imitate quick over-drawn object annotations: the mask
is thickened (over-segmentation) or thinned and then cut by small fractures.
Negative coarse maps imitate background strokes: the complement of the
target class is thinned toward scribbles, fractured, and optionally spilled
over the object boundary (the noisy part).

Five ratio levels grade annotation quality from level-1 (sparse, scribble-
like) to level-5 (close to ground truth). Schedules are nested so the
covered fraction of the relevant region is provably non-decreasing in the
level: fracture geometry is drawn independently of the level from the same
seed (counts/widths non-increasing, one shared corner list), erosion radii
are non-increasing, and negative-map spill only ever lands outside the
relevant region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .datasets import CoarseMap, NEGATIVE, POSITIVE

IGNORE = 255


class UndefinedRatioError(ValueError):
    """Coverage ratio requested over an empty relevant region."""


@dataclass(frozen=True)
class NoiseLevel:
    """Morphology schedule for one ratio level.

    For positive maps dilate/erode act on the object mask; for negative maps
    erode thins the complement and dilate is the spill (over-draw) radius.
    """

    level: int
    dilate_radius: int
    erode_radius: int
    fracture_count: int
    fracture_width: int

    def __post_init__(self):
        if not 1 <= self.level <= 5:
            raise ValueError("level must be in 1..5")
        if min(self.dilate_radius, self.erode_radius, self.fracture_count, self.fracture_width) < 0:
            raise ValueError("noise parameters must be non-negative")


POSITIVE_LEVELS = {
    1: NoiseLevel(1, dilate_radius=0, erode_radius=1, fracture_count=4, fracture_width=3),
    2: NoiseLevel(2, dilate_radius=2, erode_radius=0, fracture_count=3, fracture_width=3),
    3: NoiseLevel(3, dilate_radius=2, erode_radius=0, fracture_count=2, fracture_width=2),
    4: NoiseLevel(4, dilate_radius=1, erode_radius=0, fracture_count=1, fracture_width=1),
    5: NoiseLevel(5, dilate_radius=1, erode_radius=0, fracture_count=0, fracture_width=1),
}

NEGATIVE_LEVELS = {
    1: NoiseLevel(1, dilate_radius=0, erode_radius=3, fracture_count=8, fracture_width=4),
    2: NoiseLevel(2, dilate_radius=2, erode_radius=1, fracture_count=5, fracture_width=4),
    3: NoiseLevel(3, dilate_radius=2, erode_radius=1, fracture_count=3, fracture_width=3),
    4: NoiseLevel(4, dilate_radius=0, erode_radius=0, fracture_count=2, fracture_width=2),
    5: NoiseLevel(5, dilate_radius=0, erode_radius=0, fracture_count=0, fracture_width=1),
}


def _as_bool(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    return m.astype(bool) if m.dtype != bool else m


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def thin(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-structuring-element erosion; a pixel survives iff its whole
    (2r+1)^2 neighborhood (image exterior counts as background) is foreground."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    m = _as_bool(mask)
    if radius == 0:
        return m.copy()
    return ndi.binary_erosion(m, structure=_square(radius), border_value=0)


def thicken(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-structuring-element dilation (superset of the input)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    m = _as_bool(mask)
    if radius == 0:
        return m.copy()
    return ndi.binary_dilation(m, structure=_square(radius), border_value=0)


def _bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _fracture_specs(bbox, count: int, seed: int):
    """Level-independent cut geometry: (orientation, corner, length) per cut.

    The rng call pattern is fixed per cut, so two levels sharing a seed draw
    identical corner lists and differ only in how many cuts they keep and
    how wide the cuts are; that nesting makes coverage monotone in level.
    """
    r0, r1, c0, c1 = bbox
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(count):
        horizontal = bool(rng.integers(2))
        r = int(rng.integers(r0, r1 + 1))
        c = int(rng.integers(c0, c1 + 1))
        ext = (c1 - c0 + 1) if horizontal else (r1 - r0 + 1)
        length = int(rng.integers(max(2, ext // 3), max(3, ext + 1)))
        specs.append((horizontal, r, c, length))
    return specs


def _cut(mask: np.ndarray, specs, width: int) -> np.ndarray:
    out = mask.copy()
    H, W = out.shape
    for horizontal, r, c, length in specs:
        if horizontal:
            out[max(0, r):min(H, r + width), max(0, c):min(W, c + length)] = False
        else:
            out[max(0, r):min(H, r + length), max(0, c):min(W, c + width)] = False
    return out


def fracture(mask: np.ndarray, count: int, width: int, seed: int, bbox=None) -> np.ndarray:
    """Remove `count` axis-aligned rectangular cuts of the given width.

    Cut corners are sampled uniformly inside the foreground bounding box
    (or an explicit bbox); empty masks and count/width of zero are identity.
    """
    if count < 0 or width < 0:
        raise ValueError("count and width must be >= 0")
    m = _as_bool(mask)
    if count == 0 or width == 0:
        return m.copy()
    box = bbox if bbox is not None else _bbox(m)
    if box is None:
        return m.copy()
    return _cut(m, _fracture_specs(box, count, seed), width)


def synth_positive_coarse(
    gt: np.ndarray,
    lvl: NoiseLevel,
    seed: int,
    object_class: int = 1,
    background_class: int = 0,
) -> CoarseMap:
    """Dense positive coarse map: thicken/thin the object mask, cut fractures.

    Marked pixels carry object_class, all other pixels background_class.
    Fracture corners are drawn from the clean mask's bounding box so cut
    sets nest across levels for a fixed seed.
    """
    m = _as_bool(gt)
    base = thicken(m, lvl.dilate_radius)
    base = thin(base, lvl.erode_radius)
    box = _bbox(m)
    if box is not None and lvl.fracture_count > 0 and lvl.fracture_width > 0:
        base = _cut(base, _fracture_specs(box, lvl.fracture_count, seed), lvl.fracture_width)
    labels = np.where(base, np.uint8(object_class), np.uint8(background_class))
    return CoarseMap(labels, POSITIVE)


def synth_negative_coarse(
    gt: np.ndarray,
    target_class: int,
    lvl: NoiseLevel,
    seed: int,
    num_classes: int | None = None,
) -> CoarseMap:
    """Negative coarse map: strokes over the complement of target_class.

    The clean stroke set is the complement thinned by erode_radius and
    fractured; the corruption (dilate_radius > 0) spills strokes across the
    boundary onto the target class itself. Non-IGNORE pixels carry
    target_class, meaning "not target_class here".
    """
    if target_class < 0 or (num_classes is not None and target_class >= num_classes):
        raise ValueError(f"target_class {target_class} out of range")
    gt = np.asarray(gt)
    comp = gt != target_class
    core = thin(comp, lvl.erode_radius)
    box = _bbox(comp)
    if box is not None and lvl.fracture_count > 0 and lvl.fracture_width > 0:
        core = _cut(core, _fracture_specs(box, lvl.fracture_count, seed), lvl.fracture_width)
    marked = core
    if lvl.dilate_radius > 0:
        spill = thicken(core, lvl.dilate_radius) & ~comp
        marked = core | spill
    labels = np.where(marked, np.uint8(target_class), np.uint8(IGNORE))
    return CoarseMap(labels, NEGATIVE)


def coverage_ratio(coarse: CoarseMap, gt: np.ndarray, target_class: int | None = None) -> float:
    """Fraction of the relevant region carrying annotation.

    positive: |marked ∩ foreground| / |foreground| (foreground = gt != 0);
    negative: |marked ∩ complement| / |complement| for the stroke class
    (inferred from the map when target_class is not given).
    """
    gt = np.asarray(gt)
    if coarse.labels.shape != gt.shape:
        raise ValueError("coarse/gt shape mismatch")
    if coarse.kind == POSITIVE:
        marked = coarse.labels != 0
        relevant = gt != 0
    else:
        marked = coarse.labels != IGNORE
        if target_class is None:
            strokes = coarse.labels[marked]
            if strokes.size == 0:
                raise UndefinedRatioError(
                    "cannot infer target class of an empty negative map; pass target_class"
                )
            target_class = int(strokes[0])
        relevant = gt != target_class
    return _ratio(marked, relevant)


def _ratio(marked: np.ndarray, relevant: np.ndarray) -> float:
    denom = int(relevant.sum())
    if denom == 0:
        raise UndefinedRatioError("relevant region is empty")
    return float((marked & relevant).sum() / denom)
