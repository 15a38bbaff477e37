"""Unknown-detection strategies over classifier logits.

Five modes decide what a scored region becomes:

* ``none``    -- plain argmax over known classes + background; never unknown.
* ``direct``  -- unknown-aware head: unknown when the unknown slot wins the
                 argmax, or when background wins but objectness exceeds the
                 persisted threshold.
* ``msp``     -- unknown when the max softmax probability over known classes
                 + background falls at or below a threshold.
* ``energy``  -- unknown by thresholding a temperature-scaled log-sum-exp
                 score (two sign conventions, see RejectionConfig).
* ``odin``    -- temperature-scaled max softmax over known classes only,
                 after an optional input-gradient sign perturbation.

The unknown slot, when present, is always masked out of msp/energy/odin
scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import nms
from .model import Detection, LabelSpace, RegionProposal, validate_label_space

log = logging.getLogger(__name__)

STRATEGIES = ("none", "direct", "msp", "energy", "odin")
ENERGY_DIRECTIONS = ("literal_eq6", "negative_energy")

DEFAULT_NMS_IOU = 0.5


class MissingUnknownSlot(ValueError):
    """Direct prediction requires a head trained with an unknown class."""


@dataclass(frozen=True)
class RejectionConfig:
    """Strategy selection and thresholds.

    ``tau_energy`` and ``temperature`` default per strategy/direction when
    left as None: temperature 1000 for odin and 1 otherwise; tau_energy -3
    in literal_eq6 direction and +3 in negative_energy direction (the
    negated score is high for known samples, so low mass is flagged).
    """

    strategy: str = "none"
    tau_msp: float = 0.5
    tau_energy: float | None = None
    tau_odin: float = 0.4
    temperature: float | None = None
    epsilon: float = 0.01
    energy_direction: str = "negative_energy"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.energy_direction not in ENERGY_DIRECTIONS:
            raise ValueError(f"energy_direction must be one of {ENERGY_DIRECTIONS}")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        for name in ("tau_msp", "tau_odin"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.tau_energy is not None and not np.isfinite(self.tau_energy):
            raise ValueError("tau_energy must be finite")

    def resolved(self) -> "RejectionConfig":
        """Fill strategy-dependent defaults with concrete values."""
        tau_energy = self.tau_energy
        if tau_energy is None:
            tau_energy = -3.0 if self.energy_direction == "literal_eq6" else 3.0
        temperature = self.temperature
        if temperature is None:
            temperature = 1000.0 if self.strategy == "odin" else 1.0
        return replace(self, tau_energy=tau_energy, temperature=temperature)


@dataclass(frozen=True)
class GradientOracle:
    """Gradient of the mean log max-softmax with respect to input features.

    ``fn(model, features)`` returns the gradient vector. When unavailable,
    perturbation silently degrades to epsilon = 0.
    """

    fn: Callable[[object, np.ndarray], np.ndarray] | None = None

    @property
    def available(self) -> bool:
        return self.fn is not None


UNAVAILABLE_ORACLE = GradientOracle(fn=None)


def softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    s = np.asarray(logits, dtype=float)
    shifted = s - s.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_sum_exp(logits: Sequence[float] | np.ndarray) -> float:
    s = np.asarray(logits, dtype=float)
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()))


def direct_predict(
    logits: Sequence[float] | np.ndarray,
    objectness: float,
    tau_obj: float,
    space: LabelSpace,
) -> tuple[int, int]:
    """Unknown-aware argmax rule.

    Returns (flag, class_id): flag 1 with the unknown id when the unknown
    slot wins or background wins with objectness above tau_obj, else flag 0
    with the argmax class id (possibly background). Ties go to the lowest
    slot.
    """
    if not space.has_unknown_class:
        raise MissingUnknownSlot("direct prediction needs an unknown-aware head")
    s = np.asarray(logits, dtype=float)
    validate_label_space(space, s.shape[0])
    slot = int(np.argmax(s))
    if slot == space.unknown_slot:
        return 1, space.unknown_id
    if slot == space.background_slot and objectness > tau_obj:
        return 1, space.unknown_id
    return 0, space.class_at_slot(slot)


def msp_reject(logits: Sequence[float] | np.ndarray, tau_msp: float) -> tuple[bool, float]:
    """Max softmax probability over the given logits; unknown when <= tau."""
    score = float(softmax(logits).max())
    return score <= tau_msp, score


def energy_score(logits: Sequence[float] | np.ndarray, temperature: float) -> float:
    """-T * log(sum(exp(s / T))), computed with a max-shifted log-sum-exp."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    s = np.asarray(logits, dtype=float)
    return float(-temperature * log_sum_exp(s / temperature))


def energy_reject(
    logits: Sequence[float] | np.ndarray, config: RejectionConfig
) -> tuple[bool, float]:
    """Threshold the energy score in the configured sign convention.

    literal_eq6: score is the energy itself, flagged when score <= tau.
    negative_energy (default): score is the negated energy (high for known
    samples), flagged when score <= tau.
    """
    cfg = config.resolved()
    e = energy_score(logits, cfg.temperature)
    if cfg.energy_direction == "literal_eq6":
        return e <= cfg.tau_energy, e
    score = -e
    return score <= cfg.tau_energy, score


def odin_perturb(
    features: Sequence[float] | np.ndarray,
    model: object,
    epsilon: float,
    oracle: GradientOracle,
) -> np.ndarray:
    """Shift the input against the sign of the negated confidence gradient.

    With epsilon 0 or no oracle the input is returned unchanged (an
    unavailable oracle is a logged downgrade, never a failure).
    """
    x = np.asarray(features, dtype=float).copy()
    if epsilon == 0.0:
        return x
    if not oracle.available or model is None:
        log.warning("gradient oracle unavailable; odin perturbation downgraded to epsilon=0")
        return x
    grad = np.asarray(oracle.fn(model, x), dtype=float)
    return x - epsilon * np.sign(-grad)


def odin_reject(
    known_logits: Sequence[float] | np.ndarray,
    temperature: float,
    tau_odin: float,
) -> tuple[bool, float]:
    """Temperature-scaled max softmax over known-class logits only."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    s = np.asarray(known_logits, dtype=float)
    return msp_reject(s / temperature, tau_odin)


def _known_background_slice(logits: np.ndarray, space: LabelSpace) -> np.ndarray:
    """Mask the unknown slot: logits over known classes + background."""
    return logits[: space.num_known + 1]


def apply_rejection(
    proposals: Sequence[RegionProposal],
    config: RejectionConfig,
    model: object,
    tau_obj: float,
    space: LabelSpace,
    *,
    oracle: GradientOracle = UNAVAILABLE_ORACLE,
    nms_iou: float = DEFAULT_NMS_IOU,
) -> list[Detection]:
    """Turn scored proposals into detections under one rejection strategy.

    Every proposal becomes a known-class detection, an unknown detection,
    or is dropped (predicted background is never emitted). Per-class NMS
    runs on the result. Unknown-detection confidences: softmax probability
    of the unknown slot (direct, argmax case), objectness (direct,
    background-override case), 1 - score (msp/odin), negated score
    (energy).
    """
    cfg = config.resolved()
    if cfg.strategy == "direct" and not space.has_unknown_class:
        raise MissingUnknownSlot("direct prediction needs an unknown-aware head")
    detections: list[Detection] = []
    for p in proposals:
        if p.logits is None or p.objectness is None:
            raise ValueError("proposals must carry objectness and logits")
        full = np.asarray(p.logits, dtype=float)
        validate_label_space(space, full.shape[0])
        kb = _known_background_slice(full, space)

        if cfg.strategy == "none":
            slot = int(np.argmax(kb))
            if slot == space.background_slot:
                continue
            conf = float(softmax(kb)[slot])
            detections.append(Detection(p.box, space.class_at_slot(slot), conf, p.objectness))

        elif cfg.strategy == "direct":
            flag, class_id = direct_predict(full, p.objectness, tau_obj, space)
            if flag:
                if int(np.argmax(full)) == space.unknown_slot:
                    conf = float(softmax(full)[space.unknown_slot])
                else:
                    conf = p.objectness
                detections.append(Detection(p.box, space.unknown_id, conf, p.objectness))
            elif class_id != space.background_id:
                conf = float(softmax(full)[space.slot_of(class_id)])
                detections.append(Detection(p.box, class_id, conf, p.objectness))

        elif cfg.strategy == "msp":
            flag, score = msp_reject(kb, cfg.tau_msp)
            if flag:
                detections.append(Detection(p.box, space.unknown_id, 1.0 - score, p.objectness))
            else:
                slot = int(np.argmax(kb))
                if slot == space.background_slot:
                    continue
                detections.append(Detection(p.box, space.class_at_slot(slot), score, p.objectness))

        elif cfg.strategy == "energy":
            flag, score = energy_reject(kb, cfg)
            if flag:
                detections.append(Detection(p.box, space.unknown_id, -score, p.objectness))
            else:
                slot = int(np.argmax(kb))
                if slot == space.background_slot:
                    continue
                conf = float(softmax(kb)[slot])
                detections.append(Detection(p.box, space.class_at_slot(slot), conf, p.objectness))

        elif cfg.strategy == "odin":
            if cfg.epsilon > 0.0 and oracle.available and model is not None:
                x = odin_perturb(p.features, model, cfg.epsilon, oracle)
                scored = np.asarray(model.classifier_logits(x), dtype=float)
            else:
                scored = full
            kb_scored = _known_background_slice(scored, space)
            flag, score = odin_reject(kb_scored[: space.num_known], cfg.temperature, cfg.tau_odin)
            if flag:
                detections.append(Detection(p.box, space.unknown_id, 1.0 - score, p.objectness))
            else:
                slot = int(np.argmax(kb_scored))
                if slot == space.background_slot:
                    continue
                conf = float(softmax(kb_scored)[slot])
                detections.append(Detection(p.box, space.class_at_slot(slot), conf, p.objectness))

    return nms(detections, nms_iou)
