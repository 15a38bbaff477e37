"""Unknown discovery: data-derived objectness threshold and pseudo-labels.

The threshold is mean + lambda * population-std of objectness over the
foreground region set (per-truth argmax-IoU proposals plus proposals
overlapping any annotated truth by more than 0.7 IoU). A region is then
pseudo-labeled unknown when its objectness exceeds the threshold while
overlapping no annotated truth by more than 0.3 IoU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .geometry import iou
from .model import GroundTruthObject, LabelSpace, RegionProposal

FOREGROUND_IOU = 0.7
MATCH_IOU = 0.3
DEFAULT_LAMBDA = 1.0


class EmptyTruths(ValueError):
    """Foreground selection needs at least one annotated truth."""


class EmptyForegroundSet(ValueError):
    """Threshold statistics need at least one foreground objectness score."""


@dataclass(frozen=True)
class TauObj:
    """Objectness threshold with the statistics that produced it."""

    value: float
    mu: float
    sigma: float
    lambda_: float
    sample_count: int

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ValueError("sigma must be non-negative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.value != self.mu + self.lambda_ * self.sigma:
            raise ValueError("value must equal mu + lambda * sigma exactly")


@dataclass(frozen=True)
class PseudoLabel:
    """A region promoted to an unknown-class training annotation."""

    region: RegionProposal
    assigned_class: int
    max_gt_iou: float
    objectness: float


def select_foreground_rois(
    proposals: Sequence[RegionProposal],
    truths: Sequence[GroundTruthObject],
) -> list[int]:
    """Indices of foreground proposals with respect to annotated truths.

    A proposal is foreground when it is the highest-IoU proposal for some
    truth (provided the overlap is nonzero) or overlaps any truth by more
    than FOREGROUND_IOU. Result is duplicate-free and sorted.
    """
    if not truths:
        raise EmptyTruths("cannot select foreground proposals without truths")
    selected: set[int] = set()
    overlaps = [[iou(p.box, t.box) for t in truths] for p in proposals]
    for ti in range(len(truths)):
        best, best_iou = None, 0.0
        for pi in range(len(proposals)):
            v = overlaps[pi][ti]
            if v > best_iou:
                best, best_iou = pi, v
        if best is not None:
            selected.add(best)
    for pi in range(len(proposals)):
        if any(v > FOREGROUND_IOU for v in overlaps[pi]):
            selected.add(pi)
    return sorted(selected)


def compute_tau_obj(fg_objectness: Sequence[float], lambda_: float = DEFAULT_LAMBDA) -> TauObj:
    """Threshold statistics over foreground objectness scores.

    Sigma uses the population denominator (divide by n, not n-1). fsum keeps
    the aggregation exact and therefore order-independent.
    """
    n = len(fg_objectness)
    if n == 0:
        raise EmptyForegroundSet("foreground objectness set is empty")
    if not math.isfinite(lambda_):
        raise ValueError("lambda must be finite")
    mu = math.fsum(fg_objectness) / n
    sigma = math.sqrt(math.fsum((x - mu) ** 2 for x in fg_objectness) / n)
    return TauObj(value=mu + lambda_ * sigma, mu=mu, sigma=sigma, lambda_=lambda_, sample_count=n)


def generate_pseudo_labels(
    proposals: Sequence[RegionProposal],
    truths: Sequence[GroundTruthObject],
    tau: TauObj,
    space: LabelSpace,
) -> list[PseudoLabel]:
    """Unknown pseudo-labels: objectness above tau, truth overlap <= MATCH_IOU.

    ``truths`` are the annotated ones; with no truths every high-objectness
    proposal qualifies (max overlap over an empty set is 0). Proposals must
    already carry objectness scores.
    """
    out: list[PseudoLabel] = []
    for p in proposals:
        if p.objectness is None:
            raise ValueError("proposals must be scored before pseudo-labeling")
        if p.objectness <= tau.value:
            continue
        max_gt = max((iou(p.box, t.box) for t in truths), default=0.0)
        if max_gt > MATCH_IOU:
            continue
        out.append(
            PseudoLabel(
                region=p,
                assigned_class=space.unknown_id,
                max_gt_iou=max_gt,
                objectness=p.objectness,
            )
        )
    return out
