"""Open-set evaluation: confusion accounting, wilderness impact, unknown PRF, AP.

FP_o semantics (the one non-obvious accounting rule): the open-set false
positive counter collects (a) known-class detections whose best remaining
match is an unknown truth at or above the IoU threshold, and (b)
unknown-class detections that match no unknown truth. Both kinds inflate
the open-set denominator of the wilderness-impact ratio and the
unknown-precision denominator.

Division-by-zero metrics raise and are reported as absent, never silently
zero; the only exception is the documented 0/0 -> 0 convention inside
unknown_prf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import iou, match_greedy
from .model import Detection, GroundTruthObject, LabelSpace

DEFAULT_IOU_THRESHOLD = 0.5


class UndefinedPrecision(ArithmeticError):
    """A precision-style denominator is zero; the metric is absent, not 0."""


class EmptySet(ValueError):
    """A mean over an empty collection is undefined."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Open-set confusion counters; merging is componentwise addition."""

    tp_c: int = 0
    fp_c: int = 0
    tp_o: int = 0
    fp_o: int = 0
    fn_o: int = 0

    def __post_init__(self):
        for name in ("tp_c", "fp_c", "tp_o", "fp_o", "fn_o"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp_c + other.tp_c,
            self.fp_c + other.fp_c,
            self.tp_o + other.tp_o,
            self.fp_o + other.fp_o,
            self.fn_o + other.fn_o,
        )


def confusion_counts(
    detections: Sequence[Detection],
    truths: Sequence[GroundTruthObject],
    space: LabelSpace,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> ConfusionCounts:
    """Count one image (or any self-contained group) of detections.

    Known-class detections are greedily matched against all known truths:
    same-class matches are TP_c, cross-class matches are FP_c, and
    unmatched ones become FP_o when they overlap an unknown truth at or
    above the threshold, FP_c otherwise. Unknown-class detections are
    matched against unknown truths: matches are TP_o, the rest fold into
    FP_o. FN_o counts unknown truths not matched by unknown detections.
    """
    for d in detections:
        if d.predicted_class == space.background_id:
            raise ValueError("background detections must never be emitted")
    known_dets = [d for d in detections if space.is_known(d.predicted_class)]
    unknown_dets = [d for d in detections if d.predicted_class == space.unknown_id]
    known_truths = [t for t in truths if space.is_known(t.class_id)]
    unknown_truths = [t for t in truths if t.class_id == space.unknown_id]

    tp_c = fp_c = tp_o = fp_o = 0
    km = match_greedy(known_dets, known_truths, iou_threshold)
    for det, ti in zip(known_dets, km.detection_to_truth):
        if ti is not None:
            if known_truths[ti].class_id == det.predicted_class:
                tp_c += 1
            else:
                fp_c += 1
        else:
            best_unknown = max((iou(det.box, t.box) for t in unknown_truths), default=0.0)
            if best_unknown >= iou_threshold:
                fp_o += 1
            else:
                fp_c += 1

    um = match_greedy(unknown_dets, unknown_truths, iou_threshold)
    for ti in um.detection_to_truth:
        if ti is not None:
            tp_o += 1
        else:
            fp_o += 1
    fn_o = sum(1 for matched in um.truth_matched if not matched)

    return ConfusionCounts(tp_c=tp_c, fp_c=fp_c, tp_o=tp_o, fp_o=fp_o, fn_o=fn_o)


def merge_counts(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


def wilderness_impact(c: ConfusionCounts) -> float:
    """Closed-set precision over open-set precision, minus one."""
    if c.tp_c + c.fp_c == 0:
        raise UndefinedPrecision("closed-set precision undefined: tp_c + fp_c = 0")
    if c.tp_c + c.tp_o == 0:
        raise UndefinedPrecision("open-set precision undefined: tp_c + tp_o = 0")
    closed = c.tp_c / (c.tp_c + c.fp_c)
    open_ratio = (c.tp_c + c.fp_c + c.tp_o + c.fp_o) / (c.tp_c + c.tp_o)
    return closed * open_ratio - 1.0


def wi_no_rejection(c: ConfusionCounts) -> float:
    """No-rejection special case: open-set false positives over closed-set detections."""
    if c.tp_c + c.fp_c == 0:
        raise UndefinedPrecision("closed-set precision undefined: tp_c + fp_c = 0")
    return c.fp_o / (c.tp_c + c.fp_c)


def unknown_prf(c: ConfusionCounts) -> tuple[float, float, float]:
    """(recall, precision, f1) over the unknown class; 0/0 yields 0."""
    recall = c.tp_o / (c.tp_o + c.fn_o) if c.tp_o + c.fn_o > 0 else 0.0
    precision = c.tp_o / (c.tp_o + c.fp_o) if c.tp_o + c.fp_o > 0 else 0.0
    f1 = 2.0 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    return recall, precision, f1


def _ap_from_ranked(tp_flags: Sequence[bool], num_truths: int) -> float:
    """All-point interpolated area under the PR curve of ranked outcomes."""
    tp = np.asarray(tp_flags, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_truths
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _ranked_match_flags(
    detections_by_group: Mapping[str, Sequence[Detection]],
    truths_by_group: Mapping[str, Sequence[GroundTruthObject]],
    iou_threshold: float,
) -> tuple[list[float], list[bool]]:
    """Globally confidence-ranked detections with per-group greedy matching."""
    ranked: list[tuple[float, str, int]] = []
    for group, dets in detections_by_group.items():
        for i, d in enumerate(dets):
            ranked.append((-d.confidence, group, i))
    ranked.sort()
    taken: dict[str, list[bool]] = {g: [False] * len(ts) for g, ts in truths_by_group.items()}
    confidences: list[float] = []
    flags: list[bool] = []
    for neg_conf, group, di in ranked:
        det = detections_by_group[group][di]
        truths = truths_by_group.get(group, ())
        availability = taken.setdefault(group, [False] * len(truths))
        best, best_iou = None, 0.0
        for ti, truth in enumerate(truths):
            if availability[ti]:
                continue
            v = iou(det.box, truth.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = ti, v
        if best is not None:
            availability[best] = True
        confidences.append(-neg_conf)
        flags.append(best is not None)
    return confidences, flags


def average_precision_grouped(
    detections_by_group: Mapping[str, Sequence[Detection]],
    truths_by_group: Mapping[str, Sequence[GroundTruthObject]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> float | None:
    """Single-class AP with matching confined to each group (image).

    Detections are ranked globally by confidence; matching happens within
    the detection's own group. Returns None when there are no truths at
    all (such classes are excluded from the mAP mean) and 0.0 when truths
    exist but detections do not.
    """
    num_truths = sum(len(ts) for ts in truths_by_group.values())
    if num_truths == 0:
        return None
    _, flags = _ranked_match_flags(detections_by_group, truths_by_group, iou_threshold)
    if not flags:
        return 0.0
    return _ap_from_ranked(flags, num_truths)


def pr_curve_points(
    detections_by_group: Mapping[str, Sequence[Detection]],
    truths_by_group: Mapping[str, Sequence[GroundTruthObject]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> list[tuple[float, float, float]]:
    """(confidence, recall, precision) per ranked detection; empty when
    there are no truths or no detections."""
    num_truths = sum(len(ts) for ts in truths_by_group.values())
    if num_truths == 0:
        return []
    confidences, flags = _ranked_match_flags(detections_by_group, truths_by_group, iou_threshold)
    points = []
    tp = fp = 0
    for conf, flag in zip(confidences, flags):
        tp += int(flag)
        fp += int(not flag)
        points.append((conf, tp / num_truths, tp / (tp + fp)))
    return points


def average_precision(
    detections: Sequence[Detection],
    truths: Sequence[GroundTruthObject],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> float | None:
    """Single-class AP over one matching domain (see average_precision_grouped)."""
    return average_precision_grouped({"": detections}, {"": truths}, iou_threshold)


def mean_average_precision(per_class_ap: Mapping[int, float | None]) -> float | None:
    """Arithmetic mean of per-class APs, skipping classes without truths."""
    values = [v for v in per_class_ap.values() if v is not None]
    if not values:
        return None
    return math.fsum(values) / len(values)


def avg_obj(fg_probabilities: Sequence[float]) -> float:
    """Mean foreground probability over ground-truth foreground proposals."""
    if len(fg_probabilities) == 0:
        raise EmptySet("no foreground proposals to average over")
    for v in fg_probabilities:
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"probabilities must be in [0, 1], got {v}")
    return math.fsum(fg_probabilities) / len(fg_probabilities)


@dataclass(frozen=True)
class EvaluationReport:
    """Open-set metric bundle mirroring the comparison-table columns.

    mAP and the unknown PRF metrics are stored as percentages; both
    wilderness columns are raw ratios. Absent (undefined) metrics are None.
    """

    map_percent: float | None
    wi_no_rej: float | None
    wi: float | None
    u_recall_percent: float
    u_precision_percent: float
    u_f1_percent: float
    per_class_ap: dict[int, float | None]
    avg_obj_known: float | None
    avg_obj_unknown: float | None
    counts: ConfusionCounts
    config: dict

    def __post_init__(self):
        if (self.u_recall_percent == 0.0 or self.u_precision_percent == 0.0) and self.u_f1_percent != 0.0:
            raise ValueError("u_f1 must be 0 whenever u_recall or u_precision is 0")
        if self.counts.tp_o == 0 and self.wi is not None and self.wi_no_rej is not None:
            if abs(self.wi - self.wi_no_rej) > 1e-9 * max(1.0, abs(self.wi_no_rej)):
                raise ValueError("wi must equal wi_no_rej when tp_o = 0")


def build_report(
    counts: ConfusionCounts,
    per_class_ap: Mapping[int, float | None],
    avg_obj_known: float | None,
    avg_obj_unknown: float | None,
    config: dict,
) -> EvaluationReport:
    """Assemble a report; undefined ratios become absent values."""
    try:
        wi = wilderness_impact(counts)
    except UndefinedPrecision:
        wi = None
    try:
        wnr = wi_no_rejection(counts)
    except UndefinedPrecision:
        wnr = None
    mean_ap = mean_average_precision(per_class_ap)
    recall, precision, f1 = unknown_prf(counts)
    return EvaluationReport(
        map_percent=None if mean_ap is None else 100.0 * mean_ap,
        wi_no_rej=wnr,
        wi=wi,
        u_recall_percent=100.0 * recall,
        u_precision_percent=100.0 * precision,
        u_f1_percent=100.0 * f1,
        per_class_ap=dict(per_class_ap),
        avg_obj_known=avg_obj_known,
        avg_obj_unknown=avg_obj_unknown,
        counts=counts,
        config=dict(config),
    )
