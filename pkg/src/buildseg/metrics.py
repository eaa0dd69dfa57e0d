"""Pixel-wise cross-entropy loss, IoU and Boundary IoU.

Masks are 2-D integer/bool arrays with 1 = building. Boundary bands use
L1 distance (4-neighbour erosion) with the image border treated as
background, so all counts are exact integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from .tensor import ShapeError, Tensor, make_op

PROB_FLOOR = 1e-12


def cross_entropy(logits: Tensor, target, valid=None) -> Tensor:
    """Mean two-class cross-entropy over (valid) pixels.

    Args:
        logits: 2×H×W or B×2×H×W class scores; channel 1 is "building".
        target: H×W or B×H×W binary mask.
        valid: optional mask of the same shape as ``target``; pixels where it
            is zero contribute neither loss nor gradient.

    Returns:
        A 0-d tensor. Probabilities are clamped to ``[1e-12, 1]`` before the
        log, and clamped pixels pass no gradient.
    """
    target = np.asarray(target)
    batched = logits.ndim == 4
    class_axis = 1 if batched else 0
    spatial = logits.shape[:class_axis] + logits.shape[class_axis + 1:]
    if logits.shape[class_axis] != 2 or spatial != target.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    z = logits.data
    z = z - z.max(axis=class_axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=class_axis, keepdims=True)
    onehot = np.stack([target == 0, target == 1], axis=class_axis).astype(z.dtype)
    p_true = (p * onehot).sum(axis=class_axis)
    clamped = p_true < PROB_FLOOR
    per_pixel = -np.log(np.clip(p_true, PROB_FLOOR, 1.0))
    w = np.ones(target.shape, dtype=z.dtype) if valid is None else np.asarray(valid, dtype=z.dtype)
    if w.shape != target.shape:
        raise ShapeError(f"cross_entropy: valid mask {w.shape} vs target {target.shape}")
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy: no valid pixels")
    loss = np.asarray((per_pixel * w).sum() / count, dtype=z.dtype)

    def bw(g):
        scale = (w * ~clamped / count) * g
        return ((p - onehot) * np.expand_dims(scale, class_axis),)

    return make_op("cross_entropy", [logits], loss, bw)


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        m = m.astype(bool)
    return m


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask dimension mismatch {a.shape} vs {b.shape}")
    return a, b


def _ratio(num, den) -> float | None:
    return None if den == 0 else float(Fraction(num) / den)


def iou(a, b) -> float | None:
    """|A∩B| / |A∪B|; ``None`` when both masks are empty."""
    a, b = _check_pair(a, b)
    return _ratio(int((a & b).sum()), int((a | b).sum()))


def erode4(m: np.ndarray) -> np.ndarray:
    """One step of 4-neighbour erosion, outside the grid counts as background."""
    p = np.pad(m, 1, constant_values=False)
    return m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def boundary_band(m, d: int) -> np.ndarray:
    """Foreground pixels within L1 distance ``d`` of the background."""
    if d < 1:
        raise ValueError(f"boundary distance must be >= 1, got {d}")
    m = _as_mask(m)
    eroded = m
    for _ in range(d):
        if not eroded.any():
            break
        eroded = erode4(eroded)
    return m & ~eroded


def biou(a, b, d: int) -> float | None:
    """IoU of the two boundary bands; ``None`` when both bands are empty."""
    a, b = _check_pair(a, b)
    ba, bb = boundary_band(a, d), boundary_band(b, d)
    return _ratio(int((ba & bb).sum()), int((ba | bb).sum()))


def default_band_width(height: int, width: int) -> int:
    """2% of the image diagonal, at least one pixel (7 for 256×256)."""
    return max(1, int(round(0.02 * math.hypot(height, width))))


@dataclass
class ConfusionCounts:
    """Additive pixel counts behind dataset-level IoU/BIoU.

    ``iou_sum``/``biou_sum`` and their ``*_n`` counters carry the per-image
    scores needed for per-image averaging, held as exact fractions so that
    merging stays associative.
    """

    intersection: int = 0
    union: int = 0
    band_intersection: int = 0
    band_union: int = 0
    samples: int = 0
    samples_skipped: int = 0
    iou_sum: Fraction = field(default_factory=Fraction)
    iou_n: int = 0
    biou_sum: Fraction = field(default_factory=Fraction)
    biou_n: int = 0

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    __add__ = merge

    def iou(self, averaging: str = "micro") -> float | None:
        if averaging == "micro":
            return _ratio(self.intersection, self.union)
        if averaging == "per-image":
            return _ratio(self.iou_sum, self.iou_n)
        raise ValueError(f"unknown averaging mode {averaging!r}")

    def biou(self, averaging: str = "micro") -> float | None:
        if averaging == "micro":
            return _ratio(self.band_intersection, self.band_union)
        if averaging == "per-image":
            return _ratio(self.biou_sum, self.biou_n)
        raise ValueError(f"unknown averaging mode {averaging!r}")


def accumulate(counts: ConfusionCounts, pred, truth, d: int) -> ConfusionCounts:
    """Return ``counts`` plus the contribution of one (prediction, truth) pair.

    A pair whose union is empty adds nothing but ``samples_skipped``.
    """
    a, b = _check_pair(pred, truth)
    inter, union = int((a & b).sum()), int((a | b).sum())
    if union == 0:
        return counts.merge(ConfusionCounts(samples_skipped=1))
    ba, bb = boundary_band(a, d), boundary_band(b, d)
    binter, bunion = int((ba & bb).sum()), int((ba | bb).sum())
    return counts.merge(ConfusionCounts(
        intersection=inter,
        union=union,
        band_intersection=binter,
        band_union=bunion,
        samples=1,
        iou_sum=Fraction(inter, union),
        iou_n=1,
        biou_sum=Fraction(binter, bunion) if bunion else Fraction(0),
        biou_n=1 if bunion else 0,
    ))
