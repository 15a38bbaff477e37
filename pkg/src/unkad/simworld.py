"""Synthetic detection world and a toy differentiable detector.

Feature geometry: every object carries a shared positive "objectness"
channel (feature dim 0) plus a class signature scaled by the configured
separation. Known-class signatures are one-hot axes; unknown-cluster
signatures are uniform mixtures of two or more known axes whose weights
sum to one, so any linear scorer that ranks known objects above clutter
necessarily ranks unknown objects there too. A per-object strength
factor in STRENGTH_RANGE attenuates the whole signature, and a fraction
of the background regions are low-strength "distractors" sharing the
same signature direction. The distractors keep the objectness problem
non-separable, which bounds the learned weights and leaves foreground
scores smoothly spread below 1.0 instead of piling up at saturation --
without that spread the mean-plus-std threshold would sit above every
achievable score and nothing could ever be pseudo-labeled.

Training is plain seeded mini-batch gradient descent (no momentum) on a
logistic objectness scorer and a linear-softmax classifier head; the
feature extractor and box regression are identity maps.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import iou
from .model import (
    ANNOTATED,
    HIDDEN,
    Box,
    GroundTruthObject,
    LabelSpace,
    RegionProposal,
)
from .pseudolabel import (
    DEFAULT_LAMBDA,
    MATCH_IOU,
    PseudoLabel,
    TauObj,
    compute_tau_obj,
    generate_pseudo_labels,
    select_foreground_rois,
)
from .rejection import GradientOracle, softmax

MODES = ("unkad", "standard")

CANVAS_W, CANVAS_H = 640.0, 480.0
MIN_OBJECT_SIZE, MAX_OBJECT_SIZE = 40.0, 120.0
STRENGTH_RANGE = (0.9, 1.0)
DISTRACTOR_RATE = 0.75
DISTRACTOR_STRENGTH = (0.25, 0.6)
UNKNOWN_OBJECT_RATE = 0.4
CLASSIFIER_FG_IOU = 0.5
RECORD_EVERY = 50

_TRAIN_SALT, _TEST_SALT = 0, 1


class TrainingDiverged(ArithmeticError):
    """Loss became non-finite during gradient descent."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Generator knobs; (seed, config) fully determines both splits."""

    num_images: int = 64
    regions_per_image: tuple[float, float] = (4.0, 1.0)
    num_known_classes: int = 3
    num_unknown_clusters: int = 2
    feature_dim: int = 8
    class_mean_separation: float = 5.0
    feature_noise_scale: float = 0.3
    box_jitter_scale: float = 0.1
    background_region_rate: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if len(self.regions_per_image) != 2 or self.regions_per_image[0] < 1:
            raise ValueError("regions_per_image must be (mean >= 1, spread)")
        if self.num_known_classes < 1:
            raise ValueError("num_known_classes must be >= 1")
        if self.num_unknown_clusters < 0:
            raise ValueError("num_unknown_clusters must be >= 0")
        for name in ("class_mean_separation", "feature_noise_scale", "box_jitter_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.background_region_rate < 0:
            raise ValueError("background_region_rate must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned value")
        if self.feature_dim < self.num_known_classes + 1:
            raise ValueError("feature_dim must be >= num_known_classes + 1")
        capacity = 2**self.num_known_classes - self.num_known_classes - 1
        if 2 * self.num_unknown_clusters > capacity:
            raise ValueError(
                f"{self.num_known_classes} known classes support at most "
                f"{capacity} unknown cluster signatures, need "
                f"{2 * self.num_unknown_clusters} (train + fresh)"
            )

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace.with_known(self.num_known_classes, has_unknown_class=True)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    truths: tuple[GroundTruthObject, ...]
    proposals: tuple[RegionProposal, ...]


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    train: tuple[ImageRecord, ...]
    test: tuple[ImageRecord, ...]


def _unknown_mixtures(num_known: int, count: int) -> list[tuple[int, ...]]:
    combos: list[tuple[int, ...]] = []
    for size in range(2, num_known + 1):
        combos.extend(itertools.combinations(range(num_known), size))
    return combos[:count]


def cluster_means(config: ScenarioConfig) -> np.ndarray:
    """Feature-space means: known classes first, then train-split unknown
    clusters, then the fresh test-only clusters."""
    sep = config.class_mean_separation
    rows = []
    for k in range(config.num_known_classes):
        m = np.zeros(config.feature_dim)
        m[0] = sep
        m[1 + k] = sep
        rows.append(m)
    mixtures = _unknown_mixtures(config.num_known_classes, 2 * config.num_unknown_clusters)
    for combo in mixtures:
        m = np.zeros(config.feature_dim)
        m[0] = sep
        for j in combo:
            m[1 + j] = sep / len(combo)
        rows.append(m)
    return np.array(rows)


def distractor_mean(config: ScenarioConfig) -> np.ndarray:
    """Object-like texture signature: the uniform mixture of every known axis.

    Distractors carry it at low strength, giving the objectness scorer
    hard negatives it cannot dodge via the class-identity dimensions.
    """
    m = np.zeros(config.feature_dim)
    m[0] = config.class_mean_separation
    m[1 : 1 + config.num_known_classes] = config.class_mean_separation / config.num_known_classes
    return m


def _random_box(rng: np.random.Generator) -> Box:
    w = rng.uniform(MIN_OBJECT_SIZE, MAX_OBJECT_SIZE)
    h = rng.uniform(MIN_OBJECT_SIZE, MAX_OBJECT_SIZE)
    x = rng.uniform(0.0, CANVAS_W - w)
    y = rng.uniform(0.0, CANVAS_H - h)
    return Box(x, y, x + w, y + h)


def _place_box(rng: np.random.Generator, existing: list[Box]) -> Box:
    box = _random_box(rng)
    for _ in range(20):
        if all(iou(box, other) <= MATCH_IOU for other in existing):
            break
        box = _random_box(rng)
    return box


def _jitter_box(rng: np.random.Generator, box: Box, scale: float) -> Box:
    cx = (box.x_min + box.x_max) / 2.0 + rng.normal(0.0, scale * box.width)
    cy = (box.y_min + box.y_max) / 2.0 + rng.normal(0.0, scale * box.height)
    w = box.width * math.exp(rng.normal(0.0, scale))
    h = box.height * math.exp(rng.normal(0.0, scale))
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def _make_image(
    config: ScenarioConfig,
    means: np.ndarray,
    space: LabelSpace,
    split: str,
    salt: int,
    index: int,
    unknown_rows: Sequence[int],
) -> ImageRecord:
    rng = np.random.default_rng([config.seed, salt, index])
    mean_n, spread = config.regions_per_image
    n_obj = max(1, int(round(rng.normal(mean_n, spread))))
    texture = distractor_mean(config)
    truths: list[GroundTruthObject] = []
    proposals: list[RegionProposal] = []
    boxes: list[Box] = []
    for _ in range(n_obj):
        box = _place_box(rng, boxes)
        boxes.append(box)
        if unknown_rows and rng.random() < UNKNOWN_OBJECT_RATE:
            row = unknown_rows[int(rng.integers(len(unknown_rows)))]
            class_id, visibility = space.unknown_id, HIDDEN
        else:
            k = int(rng.integers(config.num_known_classes))
            row, class_id, visibility = k, k, ANNOTATED
        strength = rng.uniform(*STRENGTH_RANGE)
        feats = strength * means[row] + rng.normal(0.0, config.feature_noise_scale, config.feature_dim)
        truths.append(GroundTruthObject(box, class_id, visibility))
        proposals.append(
            RegionProposal(box=_jitter_box(rng, box, config.box_jitter_scale), features=tuple(feats))
        )
    for _ in range(int(rng.poisson(config.background_region_rate))):
        feats = rng.normal(0.0, config.feature_noise_scale, config.feature_dim)
        if rng.random() < DISTRACTOR_RATE:
            feats = feats + rng.uniform(*DISTRACTOR_STRENGTH) * texture
        proposals.append(RegionProposal(box=_random_box(rng), features=tuple(feats)))
    return ImageRecord(f"{split}-{index:04d}", tuple(truths), tuple(proposals))


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Deterministic train/test splits.

    Unknown objects are hidden everywhere (invisible to training); the
    train split draws them from the first half of the unknown clusters,
    the test split from all of them, so evaluation sees both revealed and
    fresh unknown signatures.
    """
    means = cluster_means(config)
    space = config.label_space
    k = config.num_known_classes
    train_rows = list(range(k, k + config.num_unknown_clusters))
    test_rows = list(range(k, k + 2 * config.num_unknown_clusters))
    train = tuple(
        _make_image(config, means, space, "train", _TRAIN_SALT, i, train_rows)
        for i in range(config.num_images)
    )
    test = tuple(
        _make_image(config, means, space, "test", _TEST_SALT, i, test_rows)
        for i in range(config.num_images)
    )
    return Scenario(config=config, train=train, test=test)


@dataclass(frozen=True)
class TrainConfig:
    """Alternating-schedule knobs; iterations are the four step budgets."""

    mode: str = "unkad"
    learning_rate: float = 0.1
    iterations: tuple[int, int, int, int] = (2000, 2000, 500, 500)
    batch_size: int = 32
    lambda_: float = DEFAULT_LAMBDA
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        # zero is allowed so the no-op update path stays exercisable
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if len(self.iterations) != 4 or any(i < 1 for i in self.iterations):
            raise ValueError("iterations must be four positive counts")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not math.isfinite(self.lambda_):
            raise ValueError("lambda must be finite")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned value")


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def logistic_loss_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy of sigmoid(X w + b) and its gradient."""
    z = X @ w + b
    loss = float(np.mean(_softplus(z) - y * z))
    g = np.asarray(sigmoid(z)) - y
    return loss, X.T @ g / len(y), float(g.mean())


def softmax_ce_loss_and_grad(
    W: np.ndarray, c: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy of X W^T + c against integer labels."""
    S = X @ W.T + c
    m = S.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(S - m).sum(axis=1))
    idx = np.arange(len(y))
    loss = float(np.mean(lse - S[idx, y]))
    P = np.exp(S - lse[:, None])
    P[idx, y] -= 1.0
    return loss, P.T @ X / len(y), P.mean(axis=0)


@dataclass
class ToyDetector:
    """Logistic objectness scorer + linear-softmax classifier head."""

    label_space: LabelSpace
    obj_w: np.ndarray
    obj_b: float
    cls_w: np.ndarray
    cls_b: np.ndarray
    tau_obj: TauObj | None = None
    trace: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def zero_init(cls, space: LabelSpace, feature_dim: int) -> "ToyDetector":
        return cls(
            label_space=space,
            obj_w=np.zeros(feature_dim),
            obj_b=0.0,
            cls_w=np.zeros((space.logit_width, feature_dim)),
            cls_b=np.zeros(space.logit_width),
            tau_obj=None,
        )

    @property
    def feature_dim(self) -> int:
        return self.obj_w.shape[0]

    def _check_features(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.feature_dim:
            raise ValueError(f"expected feature width {self.feature_dim}, got {x.shape[-1]}")

    def objectness(self, features: Sequence[float] | np.ndarray) -> float | np.ndarray:
        x = np.asarray(features, dtype=float)
        self._check_features(x)
        return sigmoid(x @ self.obj_w + self.obj_b)

    def classifier_logits(self, features: Sequence[float] | np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        self._check_features(x)
        return x @ self.cls_w.T + self.cls_b

    def score(self, image: ImageRecord) -> ImageRecord:
        """Fill objectness and logits on every proposal of one image."""
        if not image.proposals:
            return image
        X = np.array([p.features for p in image.proposals])
        probs = np.asarray(self.objectness(X))
        logits = self.classifier_logits(X)
        scored = tuple(
            replace(p, objectness=float(probs[i]), logits=tuple(logits[i]))
            for i, p in enumerate(image.proposals)
        )
        return replace(image, proposals=scored)


def annotated_truths(image: ImageRecord) -> list[GroundTruthObject]:
    return [t for t in image.truths if t.visibility == ANNOTATED]


def _background_indices(image: ImageRecord) -> list[int]:
    """Proposals overlapping no truth box (hidden ones included) above MATCH_IOU."""
    out = []
    for pi, p in enumerate(image.proposals):
        if all(iou(p.box, t.box) <= MATCH_IOU for t in image.truths):
            out.append(pi)
    return out


PseudoMap = Mapping[str, Sequence[PseudoLabel]]


def objectness_examples(
    images: Sequence[ImageRecord], pseudo: PseudoMap | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Binary example matrix: foreground proposals (plus pseudo-labeled
    regions) against pure-background regions."""
    feats: list[tuple[float, ...]] = []
    labels: list[float] = []
    for img in images:
        ann = annotated_truths(img)
        if ann:
            for pi in select_foreground_rois(img.proposals, ann):
                feats.append(img.proposals[pi].features)
                labels.append(1.0)
        for pi in _background_indices(img):
            feats.append(img.proposals[pi].features)
            labels.append(0.0)
        if pseudo:
            for pl in pseudo.get(img.image_id, ()):
                feats.append(pl.region.features)
                labels.append(1.0)
    return np.array(feats, dtype=float), np.array(labels, dtype=float)


def classifier_examples(
    images: Sequence[ImageRecord],
    space: LabelSpace,
    pseudo: PseudoMap | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Labeled example matrix: proposals assigned to annotated truths,
    background regions supervising the background slot, pseudo-labels
    supervising the unknown slot."""
    feats: list[tuple[float, ...]] = []
    labels: list[int] = []
    for img in images:
        ann = annotated_truths(img)
        for p in img.proposals:
            best_class, best_iou = None, 0.0
            for t in ann:
                v = iou(p.box, t.box)
                if v > best_iou:
                    best_class, best_iou = t.class_id, v
            if best_class is not None and best_iou >= CLASSIFIER_FG_IOU:
                feats.append(p.features)
                labels.append(space.slot_of(best_class))
        for pi in _background_indices(img):
            feats.append(img.proposals[pi].features)
            labels.append(space.background_slot)
        if pseudo:
            for pl in pseudo.get(img.image_id, ()):
                feats.append(pl.region.features)
                labels.append(space.unknown_slot)
    return np.array(feats, dtype=float), np.array(labels, dtype=int)


def _record(detector: ToyDetector, step: int, loss: float) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
    detector.trace.append((step, loss))


def train_objectness(
    detector: ToyDetector,
    images: Sequence[ImageRecord],
    config: TrainConfig,
    iterations: int,
    rng: np.random.Generator,
    pseudo: PseudoMap | None = None,
) -> None:
    """One alternating-schedule objectness step (in place)."""
    X, y = objectness_examples(images, pseudo)
    if len(y) == 0 or not (y == 1.0).any():
        raise ValueError("objectness training needs at least one positive region")
    w, b = detector.obj_w.copy(), detector.obj_b
    n = X.shape[0]
    step0 = detector.trace[-1][0] if detector.trace else 0
    for it in range(iterations):
        idx = rng.integers(0, n, size=config.batch_size)
        _, gw, gb = logistic_loss_and_grad(w, b, X[idx], y[idx])
        w -= config.learning_rate * gw
        b -= config.learning_rate * gb
        if (it + 1) % RECORD_EVERY == 0 or it + 1 == iterations:
            loss, _, _ = logistic_loss_and_grad(w, b, X, y)
            _record(detector, step0 + it + 1, loss)
    detector.obj_w, detector.obj_b = w, float(b)


def train_classifier(
    detector: ToyDetector,
    images: Sequence[ImageRecord],
    config: TrainConfig,
    iterations: int,
    rng: np.random.Generator,
    pseudo: PseudoMap | None = None,
) -> None:
    """One alternating-schedule classifier step (in place)."""
    space = detector.label_space
    X, y = classifier_examples(images, space, pseudo)
    if len(y) == 0:
        raise ValueError("classifier training needs at least one labeled region")
    if y.max() >= space.logit_width:
        raise ValueError("label outside the label space")
    W, c = detector.cls_w.copy(), detector.cls_b.copy()
    n = X.shape[0]
    step0 = detector.trace[-1][0] if detector.trace else 0
    for it in range(iterations):
        idx = rng.integers(0, n, size=config.batch_size)
        _, gW, gc = softmax_ce_loss_and_grad(W, c, X[idx], y[idx])
        W -= config.learning_rate * gW
        c -= config.learning_rate * gc
        if (it + 1) % RECORD_EVERY == 0 or it + 1 == iterations:
            loss, _, _ = softmax_ce_loss_and_grad(W, c, X, y)
            _record(detector, step0 + it + 1, loss)
    detector.cls_w, detector.cls_b = W, c


def pseudo_label_pass(
    detector: ToyDetector,
    images: Sequence[ImageRecord],
    lambda_: float = DEFAULT_LAMBDA,
) -> tuple[TauObj, dict[str, list[PseudoLabel]]]:
    """Score every image, derive the global threshold from foreground
    statistics, and collect per-image pseudo-labels (only images with
    annotated truths contribute statistics; all images receive labels)."""
    space = detector.label_space
    scored = [detector.score(img) for img in images]
    fg_scores: list[float] = []
    for img in scored:
        ann = annotated_truths(img)
        if not ann:
            continue
        for pi in select_foreground_rois(img.proposals, ann):
            fg_scores.append(img.proposals[pi].objectness)
    tau = compute_tau_obj(fg_scores, lambda_)
    labels: dict[str, list[PseudoLabel]] = {}
    for img in scored:
        found = generate_pseudo_labels(img.proposals, annotated_truths(img), tau, space)
        if found:
            labels[img.image_id] = found
    return tau, labels


@dataclass(frozen=True)
class PseudoLabelPass:
    index: int
    tau: TauObj
    labels: dict[str, list[PseudoLabel]]


@dataclass
class FourStepResult:
    detector: ToyDetector
    passes: list[PseudoLabelPass]


def run_four_step(
    images: Sequence[ImageRecord],
    num_known_classes: int,
    feature_dim: int,
    config: TrainConfig,
) -> FourStepResult:
    """Alternating schedule: objectness, classifier, objectness, classifier.

    Pseudo-labels are generated after the first and third steps; in
    standard mode the head has no unknown slot and pseudo-labels are never
    used, but the objectness threshold is still derived and persisted.
    """
    unkad = config.mode == "unkad"
    space = LabelSpace.with_known(num_known_classes, has_unknown_class=unkad)
    det = ToyDetector.zero_init(space, feature_dim)
    rng = np.random.default_rng(config.seed)
    it1, it2, it3, it4 = config.iterations
    passes: list[PseudoLabelPass] = []

    train_objectness(det, images, config, it1, rng)
    tau, labels = pseudo_label_pass(det, images, config.lambda_)
    det.tau_obj = tau
    pseudo = labels if unkad else None
    if unkad:
        passes.append(PseudoLabelPass(1, tau, labels))

    train_classifier(det, images, config, it2, rng, pseudo=pseudo)
    train_objectness(det, images, config, it3, rng, pseudo=pseudo)

    tau, labels = pseudo_label_pass(det, images, config.lambda_)
    det.tau_obj = tau
    pseudo = labels if unkad else None
    if unkad:
        passes.append(PseudoLabelPass(2, tau, labels))

    train_classifier(det, images, config, it4, rng, pseudo=pseudo)
    return FourStepResult(detector=det, passes=passes)


def gradient_oracle(detector: ToyDetector) -> GradientOracle:
    """Analytic input gradient of log max softmax over known + background."""

    def fn(model: ToyDetector, x: np.ndarray) -> np.ndarray:
        space = model.label_space
        W = model.cls_w[: space.num_known + 1]
        b = model.cls_b[: space.num_known + 1]
        s = W @ np.asarray(x, dtype=float) + b
        p = softmax(s)
        return W[int(np.argmax(s))] - p @ W

    return GradientOracle(fn=fn)


def truth_foreground_objectness(
    scored_images: Sequence[ImageRecord], space: LabelSpace
) -> tuple[list[float], list[float]]:
    """Objectness of each truth's argmax-IoU proposal, split known/unknown."""
    known: list[float] = []
    unknown: list[float] = []
    for img in scored_images:
        for t in img.truths:
            best, best_iou = None, 0.0
            for p in img.proposals:
                v = iou(t.box, p.box)
                if v > best_iou:
                    best, best_iou = p, v
            if best is None or best.objectness is None:
                continue
            (known if space.is_known(t.class_id) else unknown).append(best.objectness)
    return known, unknown
