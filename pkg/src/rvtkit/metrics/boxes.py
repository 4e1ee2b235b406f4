"""Box metrics over per-frame greedy one-to-one matching.

All three reductions share the same matching: within a frame, candidate
(gt, prediction) pairs are taken in descending IoU order, each box used at
most once, and zero-overlap pairs never match. Frames empty on both sides
are excluded, mirroring the mask metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

from ..dtcore import ArgumentError, Box, BoxSequence

BoxPairs = Sequence[tuple[BoxSequence, BoxSequence]]


def box_area(box: Box) -> int:
    return box[2] * box[3]


def box_intersection(a: Box, b: Box) -> int:
    w = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    h = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def box_iou(a: Box, b: Box) -> float:
    inter = box_intersection(a, b)
    union = box_area(a) + box_area(b) - inter
    return inter / union if union else 0.0


def _validate_box(box: Box, resolution: Optional[tuple[int, int]]) -> None:
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise ArgumentError(f"degenerate box {box}")
    if resolution is not None:
        height, width = resolution
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise ArgumentError(f"box {box} lies outside the {width}x{height} frame")


@dataclass(frozen=True)
class _FrameMatch:
    inter_sum: int
    union_sum: int  # matched-pair unions plus unmatched box areas
    ious: tuple[float, ...]
    zero_slots: int  # unmatched boxes, each a 0 entry in the frame mean

    def frame_iou(self) -> float:
        entries = len(self.ious) + self.zero_slots
        return sum(self.ious) / entries if entries else 0.0

    def best(self) -> float:
        return max(self.ious, default=0.0)


def _match_frame(gt_boxes: Sequence[Box], pred_boxes: Sequence[Box]) -> _FrameMatch:
    candidates = sorted(
        (
            (box_iou(g, p), gi, pi)
            for gi, g in enumerate(gt_boxes)
            for pi, p in enumerate(pred_boxes)
        ),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    inter_sum = union_sum = 0
    ious: list[float] = []
    for iou, gi, pi in candidates:
        if iou <= 0.0 or gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        inter = box_intersection(gt_boxes[gi], pred_boxes[pi])
        inter_sum += inter
        union_sum += box_area(gt_boxes[gi]) + box_area(pred_boxes[pi]) - inter
        ious.append(iou)
    for gi, g in enumerate(gt_boxes):
        if gi not in used_gt:
            union_sum += box_area(g)
    for pi, p in enumerate(pred_boxes):
        if pi not in used_pred:
            union_sum += box_area(p)
    zero_slots = (len(gt_boxes) - len(used_gt)) + (len(pred_boxes) - len(used_pred))
    return _FrameMatch(
        inter_sum=inter_sum, union_sum=union_sum, ious=tuple(ious), zero_slots=zero_slots
    )


def _frame_matches(
    pairs: BoxPairs, resolution: Optional[tuple[int, int]] = None
) -> Iterator[_FrameMatch]:
    for gt, pred in pairs:
        stray = set(pred.frames) - set(gt.frames)
        if stray:
            raise ArgumentError(
                f"prediction has frames absent from ground truth: {sorted(stray)}"
            )
        for t in sorted(gt.frames):
            gt_boxes = gt.frames[t]
            pred_boxes = pred.frames.get(t, ())
            for box in (*gt_boxes, *pred_boxes):
                _validate_box(box, resolution)
            if not gt_boxes and not pred_boxes:
                continue
            yield _match_frame(gt_boxes, pred_boxes)


def ciou(pairs: BoxPairs, resolution: Optional[tuple[int, int]] = None) -> float:
    """Cumulative IoU: summed intersections over summed unions, all frames."""
    inter_total = union_total = 0
    for match in _frame_matches(pairs, resolution):
        inter_total += match.inter_sum
        union_total += match.union_sum
    return inter_total / union_total if union_total else 1.0


def giou(pairs: BoxPairs, resolution: Optional[tuple[int, int]] = None) -> float:
    """Mean per-frame IoU; unmatched boxes enter the frame mean as zeros.

    Despite the conventional abbreviation this is not generalized IoU.
    """
    scores = [match.frame_iou() for match in _frame_matches(pairs, resolution)]
    return sum(scores) / len(scores) if scores else 1.0


def ap50(pairs: BoxPairs, resolution: Optional[tuple[int, int]] = None) -> float:
    """Share of frames whose best matched pair reaches IoU >= 0.5.

    Unranked reduction: predictions carry no usable confidence ordering, so
    every frame counts equally instead of entering a precision-recall sweep.
    """
    hits = total = 0
    for match in _frame_matches(pairs, resolution):
        total += 1
        hits += match.best() >= 0.5
    return hits / total if total else 1.0
