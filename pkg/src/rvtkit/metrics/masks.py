"""Mask metrics: region similarity (J) and boundary quality (F).

Both walk the ground-truth frame index; predictions missing a frame are
treated as empty there (a miss), and frames where both sides are empty are
excluded from the mean — an all-empty comparison is vacuously perfect (1.0).
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from ..dtcore import ArgumentError, DimensionError, MaskRLE, MaskSequence, decode_rle


def _merged_bitmap(masks: Sequence[MaskRLE]) -> Optional[np.ndarray]:
    out: Optional[np.ndarray] = None
    for m in masks:
        bitmap = decode_rle(m).astype(bool)
        if out is None:
            out = bitmap
        elif bitmap.shape != out.shape:
            raise DimensionError(
                f"mask resolutions differ within a frame: {bitmap.shape} vs {out.shape}"
            )
        else:
            out = out | bitmap
    return out


def _frame_pairs(
    gt: MaskSequence, pred: MaskSequence
) -> Iterator[tuple[Optional[np.ndarray], Optional[np.ndarray]]]:
    stray = set(pred.frames) - set(gt.frames)
    if stray:
        raise ArgumentError(f"prediction has frames absent from ground truth: {sorted(stray)}")
    for t in sorted(gt.frames):
        a = _merged_bitmap(gt.frames[t])
        b = _merged_bitmap(pred.frames.get(t, ()))
        if a is not None and b is not None and a.shape != b.shape:
            raise DimensionError(
                f"frame {t}: ground truth is {a.shape}, prediction is {b.shape}"
            )
        yield a, b


def jaccard(gt: MaskSequence, pred: MaskSequence) -> float:
    """Mean per-frame intersection-over-union."""
    scores: list[float] = []
    for a, b in _frame_pairs(gt, pred):
        gt_any = a is not None and bool(a.any())
        pred_any = b is not None and bool(b.any())
        if not gt_any and not pred_any:
            continue
        if not gt_any or not pred_any:
            scores.append(0.0)
            continue
        inter = int(np.logical_and(a, b).sum())
        union = int(np.logical_or(a, b).sum())
        scores.append(inter / union)
    return sum(scores) / len(scores) if scores else 1.0


def _boundary(bitmap: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor or on the image edge."""
    padded = np.pad(bitmap, 1, constant_values=False)
    interior = (
        padded[1:-1, 1:-1]
        & padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return bitmap & ~interior


def _disk_kernel(radius: float) -> np.ndarray:
    # math.hypot on integer offsets, so the dilation reach is bit-for-bit the
    # same distance test a point-by-point matcher would apply.
    r = max(int(radius), 0)
    kernel = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if math.hypot(dx, dy) <= radius:
                kernel[dy + r, dx + r] = True
    return kernel


def boundary_f(gt: MaskSequence, pred: MaskSequence, tolerance_fraction: float = 0.008) -> float:
    """Mean per-frame contour F-measure.

    A boundary pixel counts as matched when some pixel of the other boundary
    lies within ``tolerance_fraction`` of the image diagonal.
    """
    if tolerance_fraction < 0:
        raise ArgumentError(f"tolerance fraction must be >= 0, got {tolerance_fraction}")
    scores: list[float] = []
    for a, b in _frame_pairs(gt, pred):
        gt_any = a is not None and bool(a.any())
        pred_any = b is not None and bool(b.any())
        if not gt_any and not pred_any:
            continue
        if not gt_any or not pred_any:
            scores.append(0.0)
            continue
        radius = tolerance_fraction * math.hypot(*a.shape)
        kernel = _disk_kernel(radius)
        gt_boundary = _boundary(a)
        pred_boundary = _boundary(b)
        gt_reach = ndimage.binary_dilation(gt_boundary, structure=kernel)
        pred_reach = ndimage.binary_dilation(pred_boundary, structure=kernel)
        precision = int((pred_boundary & gt_reach).sum()) / int(pred_boundary.sum())
        recall = int((gt_boundary & pred_reach).sum()) / int(gt_boundary.sum())
        if precision + recall == 0:
            scores.append(0.0)
        else:
            scores.append(2 * precision * recall / (precision + recall))
    return sum(scores) / len(scores) if scores else 1.0


def jf_mean(j: float, f: float) -> float:
    """The J&F aggregate: plain average of the two scores."""
    for name, value in (("J", j), ("F", f)):
        if not 0.0 <= value <= 1.0:
            raise ArgumentError(f"{name} must lie in [0, 1], got {value}")
    return (j + f) / 2.0
