"""Box arithmetic: IoU, greedy detection-truth matching, per-class NMS.

Areas use the continuous w*h convention (no pixel +1 term), applied
uniformly across the whole package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .model import Box, Detection, GroundTruthObject


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes; 0 when disjoint."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    if iw <= 0.0:
        return 0.0
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _check_threshold(iou_threshold: float) -> None:
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")


@dataclass(frozen=True)
class MatchResult:
    """Per-detection truth assignment (or None) and per-truth matched flags."""

    detection_to_truth: tuple[int | None, ...]
    truth_matched: tuple[bool, ...]


def match_greedy(
    detections: Sequence[Detection],
    truths: Sequence[GroundTruthObject],
    iou_threshold: float,
) -> MatchResult:
    """Greedy one-to-one matching in descending-confidence order.

    Each detection (ties broken by ascending index) takes the highest-IoU
    still-unmatched truth with IoU >= threshold; IoU ties resolve to the
    lowest truth index.
    """
    _check_threshold(iou_threshold)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    assigned: list[int | None] = [None] * len(detections)
    taken = [False] * len(truths)
    for di in order:
        # scanning in ascending truth index with a strict ">" keeps the
        # lowest index on equal IoU
        best = None
        best_iou = 0.0
        for ti, truth in enumerate(truths):
            if taken[ti]:
                continue
            v = iou(detections[di].box, truth.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = ti, v
        if best is not None:
            assigned[di] = best
            taken[best] = True
    return MatchResult(tuple(assigned), tuple(taken))


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression within each predicted class.

    Returns the surviving subset in the original input order.
    """
    _check_threshold(iou_threshold)
    n = len(detections)
    order = sorted(range(n), key=lambda i: (-detections[i].confidence, i))
    keep = [False] * n
    suppressed = [False] * n
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep[i] = True
        for j in order[pos + 1:]:
            if suppressed[j] or detections[j].predicted_class != detections[i].predicted_class:
                continue
            if iou(detections[i].box, detections[j].box) > iou_threshold:
                suppressed[j] = True
    return [d for i, d in enumerate(detections) if keep[i]]
