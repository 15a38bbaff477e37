"""Shared domain types: boxes, label spaces, region proposals, truths, detections.

Class-id convention used everywhere: known classes occupy 0..K-1, background
is K and unknown is K+1, so logit vectors can be indexed by slot directly.
All types are immutable values and safe to share between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

ANNOTATED = "annotated"
HIDDEN = "hidden"
VISIBILITIES = (ANNOTATED, HIDDEN)


class LabelSpaceViolation(ValueError):
    """Logit vector width does not match the label-space contract."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous pixel coordinates (corner form)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite: {self!r}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have strictly positive area: {self!r}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class LabelSpace:
    """Class-id layout shared by the classifier head and all of its consumers.

    ``has_unknown_class`` is true for heads trained with the unknown-aware
    schedule; only then does the logit vector carry a trailing unknown slot.
    """

    known_classes: tuple[int, ...]
    background_id: int
    unknown_id: int
    has_unknown_class: bool

    def __post_init__(self):
        if not self.known_classes:
            raise ValueError("label space needs at least one known class")
        if len(set(self.known_classes)) != len(self.known_classes):
            raise ValueError("known classes must be duplicate-free")
        if self.background_id == self.unknown_id:
            raise ValueError("background and unknown ids must differ")
        if {self.background_id, self.unknown_id} & set(self.known_classes):
            raise ValueError("background/unknown ids must not collide with known classes")

    @classmethod
    def with_known(cls, num_known: int, has_unknown_class: bool) -> "LabelSpace":
        """Standard layout: known ids 0..K-1, background K, unknown K+1."""
        if num_known < 1:
            raise ValueError("num_known must be >= 1")
        return cls(
            known_classes=tuple(range(num_known)),
            background_id=num_known,
            unknown_id=num_known + 1,
            has_unknown_class=has_unknown_class,
        )

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def logit_width(self) -> int:
        return self.num_known + (2 if self.has_unknown_class else 1)

    @property
    def background_slot(self) -> int:
        return self.num_known

    @property
    def unknown_slot(self) -> int:
        if not self.has_unknown_class:
            raise LabelSpaceViolation("this head has no unknown slot")
        return self.num_known + 1

    def is_known(self, class_id: int) -> bool:
        return class_id in self.known_classes

    def slot_of(self, class_id: int) -> int:
        """Logit slot of a class id (unknown requires has_unknown_class)."""
        if class_id == self.background_id:
            return self.background_slot
        if class_id == self.unknown_id:
            return self.unknown_slot
        try:
            return self.known_classes.index(class_id)
        except ValueError:
            raise ValueError(f"class id {class_id} is not in the label space") from None

    def class_at_slot(self, slot: int) -> int:
        if 0 <= slot < self.num_known:
            return self.known_classes[slot]
        if slot == self.background_slot:
            return self.background_id
        if self.has_unknown_class and slot == self.unknown_slot:
            return self.unknown_id
        raise ValueError(f"slot {slot} outside logit width {self.logit_width}")


def validate_label_space(space: LabelSpace, logit_width: int) -> None:
    """Check that a logit vector width matches the label-space contract.

    Raises LabelSpaceViolation naming the expected vs actual width.
    """
    if logit_width != space.logit_width:
        raise LabelSpaceViolation(
            f"expected logit width {space.logit_width} "
            f"({space.num_known} known + background"
            f"{' + unknown' if space.has_unknown_class else ''}), got {logit_width}"
        )


@dataclass(frozen=True)
class RegionProposal:
    """Candidate region: box, feature vector, and (once scored) objectness/logits."""

    box: Box
    features: tuple[float, ...]
    objectness: float | None = None
    logits: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.objectness is not None and not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must be in [0, 1], got {self.objectness}")

    def scored(self) -> bool:
        return self.objectness is not None and self.logits is not None


@dataclass(frozen=True)
class GroundTruthObject:
    """A real object in an image; hidden objects are invisible to training."""

    box: Box
    class_id: int
    visibility: str

    def __post_init__(self):
        if self.visibility not in VISIBILITIES:
            raise ValueError(f"visibility must be one of {VISIBILITIES}, got {self.visibility!r}")


def check_truth_consistent(space: LabelSpace, truth: GroundTruthObject) -> None:
    """Unknown objects must be hidden; annotated objects must carry a known class."""
    if truth.class_id == space.unknown_id and truth.visibility != HIDDEN:
        raise ValueError("unknown-class objects must have hidden visibility")
    if truth.visibility == ANNOTATED and not space.is_known(truth.class_id):
        raise ValueError("annotated objects must carry a known class")


@dataclass(frozen=True)
class Detection:
    """Inference output record; background is never emitted as a detection."""

    box: Box
    predicted_class: int
    confidence: float
    source_objectness: float

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise ValueError(f"confidence must be finite, got {self.confidence}")
        if not (0.0 <= self.source_objectness <= 1.0):
            raise ValueError(f"source objectness must be in [0, 1], got {self.source_objectness}")
