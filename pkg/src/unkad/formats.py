"""Interchange formats: strict JSON configs, JSONL record streams, reports.

Field names are frozen in FORMATS.md. Every emitted file begins with a
format-version field; readers reject unknown major versions. Unknown
fields in config files are rejected, never ignored. Serialization is
deterministic: identical in-memory values produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import ConfusionCounts, EvaluationReport
from .model import Box, Detection, GroundTruthObject, LabelSpace, RegionProposal
from .pseudolabel import PseudoLabel, TauObj
from .rejection import RejectionConfig
from .simworld import ImageRecord, ScenarioConfig, ToyDetector, TrainConfig

FORMAT_VERSION = "1.0"


class FormatError(ValueError):
    """A file does not conform to the interchange format."""


class ConfigError(ValueError):
    """A configuration document carries unknown or invalid fields."""


class ManifestMismatch(ValueError):
    """Artifacts from different scenarios cannot be combined."""


def check_version(obj: Mapping, where: str) -> None:
    version = obj.get("format_version")
    if version is None:
        raise FormatError(f"{where}: missing format_version")
    major = str(version).split(".", 1)[0]
    if major != FORMAT_VERSION.split(".", 1)[0]:
        raise FormatError(f"{where}: unsupported format_version {version!r}")


def _require_known_fields(d: Mapping, allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}; allowed: {sorted(allowed)}")


def dump_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


def config_hash(config_dict: Mapping) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(blob.encode()).hexdigest()


def write_jsonl(path: str | Path, header: dict, records: Iterable[dict]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for record in records:
            f.write(json.dumps(record) + "\n")


def read_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = json.loads(lines[0])
    check_version(header, str(path))
    return header, [json.loads(line) for line in lines[1:] if line]


# --- configs -----------------------------------------------------------

_SCENARIO_FIELDS = (
    "num_images", "regions_per_image", "num_known_classes", "num_unknown_clusters",
    "feature_dim", "class_mean_separation", "feature_noise_scale", "box_jitter_scale",
    "background_region_rate", "seed",
)


def scenario_config_to_dict(config: ScenarioConfig) -> dict:
    return {
        "num_images": config.num_images,
        "regions_per_image": list(config.regions_per_image),
        "num_known_classes": config.num_known_classes,
        "num_unknown_clusters": config.num_unknown_clusters,
        "feature_dim": config.feature_dim,
        "class_mean_separation": config.class_mean_separation,
        "feature_noise_scale": config.feature_noise_scale,
        "box_jitter_scale": config.box_jitter_scale,
        "background_region_rate": config.background_region_rate,
        "seed": config.seed,
    }


def scenario_config_from_dict(d: Mapping, where: str = "scenario config") -> ScenarioConfig:
    _require_known_fields(d, _SCENARIO_FIELDS, where)
    kwargs = dict(d)
    if "regions_per_image" in kwargs:
        kwargs["regions_per_image"] = tuple(kwargs["regions_per_image"])
    try:
        return ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_TRAIN_FIELDS = ("mode", "learning_rate", "iterations", "batch_size", "lambda", "seed")


def train_config_to_dict(config: TrainConfig) -> dict:
    return {
        "mode": config.mode,
        "learning_rate": config.learning_rate,
        "iterations": list(config.iterations),
        "batch_size": config.batch_size,
        "lambda": config.lambda_,
        "seed": config.seed,
    }


def train_config_from_dict(d: Mapping, where: str = "train config") -> TrainConfig:
    _require_known_fields(d, _TRAIN_FIELDS, where)
    kwargs = dict(d)
    if "lambda" in kwargs:
        kwargs["lambda_"] = kwargs.pop("lambda")
    if "iterations" in kwargs:
        kwargs["iterations"] = tuple(kwargs["iterations"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_REJECTION_FIELDS = (
    "strategy", "tau_msp", "tau_energy", "tau_odin", "temperature", "epsilon",
    "energy_direction",
)


def rejection_config_to_dict(config: RejectionConfig) -> dict:
    return {
        "strategy": config.strategy,
        "tau_msp": config.tau_msp,
        "tau_energy": config.tau_energy,
        "tau_odin": config.tau_odin,
        "temperature": config.temperature,
        "epsilon": config.epsilon,
        "energy_direction": config.energy_direction,
    }


def rejection_config_from_dict(d: Mapping, where: str = "rejection config") -> RejectionConfig:
    _require_known_fields(d, _REJECTION_FIELDS, where)
    try:
        return RejectionConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --- domain values -----------------------------------------------------

def box_to_list(box: Box) -> list[float]:
    return [box.x_min, box.y_min, box.x_max, box.y_max]


def box_from_list(values: Sequence[float]) -> Box:
    return Box(*values)


def truth_to_dict(t: GroundTruthObject) -> dict:
    return {"box": box_to_list(t.box), "class_id": t.class_id, "visibility": t.visibility}


def truth_from_dict(d: Mapping) -> GroundTruthObject:
    return GroundTruthObject(box_from_list(d["box"]), d["class_id"], d["visibility"])


def proposal_to_dict(p: RegionProposal) -> dict:
    return {
        "box": box_to_list(p.box),
        "features": list(p.features),
        "objectness": p.objectness,
        "logits": None if p.logits is None else list(p.logits),
    }


def proposal_from_dict(d: Mapping) -> RegionProposal:
    logits = d.get("logits")
    return RegionProposal(
        box=box_from_list(d["box"]),
        features=tuple(d["features"]),
        objectness=d.get("objectness"),
        logits=None if logits is None else tuple(logits),
    )


def image_record_to_dict(img: ImageRecord) -> dict:
    return {
        "image_id": img.image_id,
        "truths": [truth_to_dict(t) for t in img.truths],
        "proposals": [proposal_to_dict(p) for p in img.proposals],
    }


def image_record_from_dict(d: Mapping) -> ImageRecord:
    return ImageRecord(
        image_id=d["image_id"],
        truths=tuple(truth_from_dict(t) for t in d["truths"]),
        proposals=tuple(proposal_from_dict(p) for p in d["proposals"]),
    )


def tau_to_dict(tau: TauObj) -> dict:
    return {
        "value": tau.value,
        "mu": tau.mu,
        "sigma": tau.sigma,
        "lambda": tau.lambda_,
        "sample_count": tau.sample_count,
    }


def tau_from_dict(d: Mapping) -> TauObj:
    return TauObj(
        value=d["value"], mu=d["mu"], sigma=d["sigma"],
        lambda_=d["lambda"], sample_count=d["sample_count"],
    )


def label_space_to_dict(space: LabelSpace) -> dict:
    return {
        "known_classes": list(space.known_classes),
        "background_id": space.background_id,
        "unknown_id": space.unknown_id,
        "has_unknown_class": space.has_unknown_class,
    }


def label_space_from_dict(d: Mapping) -> LabelSpace:
    return LabelSpace(
        known_classes=tuple(d["known_classes"]),
        background_id=d["background_id"],
        unknown_id=d["unknown_id"],
        has_unknown_class=d["has_unknown_class"],
    )


def detection_to_dict(det: Detection) -> dict:
    return {
        "box": box_to_list(det.box),
        "predicted_class": det.predicted_class,
        "confidence": det.confidence,
        "source_objectness": det.source_objectness,
    }


def detection_from_dict(d: Mapping) -> Detection:
    return Detection(
        box=box_from_list(d["box"]),
        predicted_class=d["predicted_class"],
        confidence=d["confidence"],
        source_objectness=d["source_objectness"],
    )


def pseudo_label_to_dict(pl: PseudoLabel) -> dict:
    return {
        "region": proposal_to_dict(pl.region),
        "assigned_class": pl.assigned_class,
        "max_gt_iou": pl.max_gt_iou,
        "objectness": pl.objectness,
    }


def pseudo_label_from_dict(d: Mapping) -> PseudoLabel:
    return PseudoLabel(
        region=proposal_from_dict(d["region"]),
        assigned_class=d["assigned_class"],
        max_gt_iou=d["max_gt_iou"],
        objectness=d["objectness"],
    )


# --- model file --------------------------------------------------------

def model_to_dict(
    detector: ToyDetector,
    mode: str,
    scenario_hash: str,
    train_config: TrainConfig,
) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "mode": mode,
        "scenario_hash": scenario_hash,
        "train_config": train_config_to_dict(train_config),
        "label_space": label_space_to_dict(detector.label_space),
        "feature_dim": detector.feature_dim,
        "objectness": {"weights": list(detector.obj_w), "bias": detector.obj_b},
        "classifier": {
            "weights": [list(row) for row in detector.cls_w],
            "bias": list(detector.cls_b),
        },
        "tau_obj": None if detector.tau_obj is None else tau_to_dict(detector.tau_obj),
    }


def model_from_dict(d: Mapping, where: str = "model") -> tuple[ToyDetector, str, str, TrainConfig]:
    check_version(d, where)
    if d.get("kind") != "model":
        raise FormatError(f"{where}: expected kind 'model', got {d.get('kind')!r}")
    detector = ToyDetector(
        label_space=label_space_from_dict(d["label_space"]),
        obj_w=np.array(d["objectness"]["weights"], dtype=float),
        obj_b=float(d["objectness"]["bias"]),
        cls_w=np.array(d["classifier"]["weights"], dtype=float),
        cls_b=np.array(d["classifier"]["bias"], dtype=float),
        tau_obj=None if d.get("tau_obj") is None else tau_from_dict(d["tau_obj"]),
    )
    return detector, d["mode"], d["scenario_hash"], train_config_from_dict(d["train_config"])


# --- report ------------------------------------------------------------

def counts_to_dict(c: ConfusionCounts) -> dict:
    return {"tp_c": c.tp_c, "fp_c": c.fp_c, "tp_o": c.tp_o, "fp_o": c.fp_o, "fn_o": c.fn_o}


def counts_from_dict(d: Mapping) -> ConfusionCounts:
    return ConfusionCounts(**d)


def report_to_dict(report: EvaluationReport) -> dict:
    return {
        "map_percent": report.map_percent,
        "wi_no_rej": report.wi_no_rej,
        "wi": report.wi,
        "u_recall_percent": report.u_recall_percent,
        "u_precision_percent": report.u_precision_percent,
        "u_f1_percent": report.u_f1_percent,
        "per_class_ap": {str(k): v for k, v in sorted(report.per_class_ap.items())},
        "avg_obj_known": report.avg_obj_known,
        "avg_obj_unknown": report.avg_obj_unknown,
        "counts": counts_to_dict(report.counts),
        "config": report.config,
    }


def report_from_dict(d: Mapping) -> EvaluationReport:
    return EvaluationReport(
        map_percent=d["map_percent"],
        wi_no_rej=d["wi_no_rej"],
        wi=d["wi"],
        u_recall_percent=d["u_recall_percent"],
        u_precision_percent=d["u_precision_percent"],
        u_f1_percent=d["u_f1_percent"],
        per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
        avg_obj_known=d["avg_obj_known"],
        avg_obj_unknown=d["avg_obj_unknown"],
        counts=counts_from_dict(d["counts"]),
        config=dict(d["config"]),
    )


# --- text tables -------------------------------------------------------

TABLE_HEADER = ("Training", "Rejection", "mAP%", "WI_no_rej", "WI", "U_Recall", "U_Precision", "U_F1")
TABLE_VERSION_LINE = f"# format_version={FORMAT_VERSION} kind=report_table\n"


def format_metric(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def report_table_row(training: str, rejection: str, payload: Mapping) -> tuple[str, ...]:
    return (
        training,
        rejection,
        format_metric(payload["map_percent"]),
        format_metric(payload["wi_no_rej"]),
        format_metric(payload["wi"]),
        format_metric(payload["u_recall_percent"]),
        format_metric(payload["u_precision_percent"]),
        format_metric(payload["u_f1_percent"]),
    )


def render_table(rows: Sequence[tuple[str, ...]]) -> str:
    table = [TABLE_HEADER, *rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(TABLE_HEADER))]
    lines = []
    for r in table:
        cells = [r[0].ljust(widths[0]), r[1].ljust(widths[1])]
        cells += [r[i].rjust(widths[i]) for i in range(2, len(widths))]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"
