"""Independent reference implementations used as test oracles.

Everything here is deliberately written against the stated semantics,
not against the package code: shapely for box overlap, Fraction
arithmetic for count-ratio formulas, naive full-curve materialization
for AP, and a literal prose-following matcher. Keep these free of
imports from unkad internals beyond the plain data types.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from shapely.geometry import box as shapely_box


def iou_shapely(a, b) -> float:
    """IoU via a computational-geometry library (independent arithmetic)."""
    pa = shapely_box(a.x_min, a.y_min, a.x_max, a.y_max)
    pb = shapely_box(b.x_min, b.y_min, b.x_max, b.y_max)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    return inter / union if union > 0 else 0.0


def match_reference(det_boxes, det_confidences, truth_boxes, iou_fn, threshold):
    """Prose-literal greedy matcher over raw boxes.

    Detections processed by descending confidence (ties by input order);
    each takes the highest-IoU unmatched truth at/above the threshold,
    IoU ties to the lowest truth index. Returns (assignments, matched).
    """
    order = sorted(range(len(det_boxes)), key=lambda i: (-det_confidences[i], i))
    assignments = [None] * len(det_boxes)
    matched = [False] * len(truth_boxes)
    for di in order:
        candidates = []
        for ti, tb in enumerate(truth_boxes):
            if matched[ti]:
                continue
            v = iou_fn(det_boxes[di], tb)
            if v >= threshold:
                candidates.append((v, -ti))
        if candidates:
            best_v, neg_ti = max(candidates)
            assignments[di] = -neg_ti
            matched[-neg_ti] = True
    return assignments, matched


def wilderness_impact_fraction(tp_c, fp_c, tp_o, fp_o) -> Fraction:
    closed = Fraction(tp_c, tp_c + fp_c)
    open_ratio = Fraction(tp_c + fp_c + tp_o + fp_o, tp_c + tp_o)
    return closed * open_ratio - 1


def wi_no_rejection_fraction(tp_c, fp_c, fp_o) -> Fraction:
    return Fraction(fp_o, tp_c + fp_c)


def unknown_prf_fraction(tp_o, fp_o, fn_o):
    recall = Fraction(tp_o, tp_o + fn_o) if tp_o + fn_o else Fraction(0)
    precision = Fraction(tp_o, tp_o + fp_o) if tp_o + fp_o else Fraction(0)
    f1 = 2 * recall * precision / (recall + precision) if recall + precision else Fraction(0)
    return recall, precision, f1


def ap_reference(tp_flags, num_truths) -> float:
    """All-point AP by materializing the full PR curve and taking, at
    every recall jump, the maximum precision at or beyond that recall."""
    points = []
    tp = fp = 0
    for flag in tp_flags:
        tp += int(flag)
        fp += int(not flag)
        points.append((tp / num_truths, tp / (tp + fp)))
    ap = 0.0
    prev = 0.0
    for i, (recall, _) in enumerate(points):
        if recall == prev:
            continue
        ap += (recall - prev) * max(p for r, p in points[i:])
        prev = recall
    return ap


def energy_naive(logits, temperature) -> float:
    return -temperature * math.log(math.fsum(math.exp(float(v) / temperature) for v in logits))


def central_difference(f, x, h=1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = np.zeros_like(x)
        hi[i] = h
        grad[i] = (f(x + hi) - f(x - hi)) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom
