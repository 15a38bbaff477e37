"""Command-line surface: simulate, train, pseudo-label, evaluate, report.

Exit codes: 0 success, 1 validation/config error, 2 runtime or numeric
error. ``--out`` falls back to the UNKAD_OUT_DIR environment variable.
Outputs are byte-stable across reruns with identical inputs and do not
depend on ``--threads``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import formats, metrics, simworld
from .formats import ConfigError, FormatError, ManifestMismatch
from .model import ANNOTATED, HIDDEN
from .rejection import DEFAULT_NMS_IOU, RejectionConfig, apply_rejection
from .simworld import (
    ImageRecord,
    ScenarioConfig,
    ToyDetector,
    TrainConfig,
    generate_scenario,
    gradient_oracle,
    pseudo_label_pass,
    run_four_step,
    truth_foreground_objectness,
)

ENV_OUT_DIR = "UNKAD_OUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise ConfigError(message)


def _out_dir(args) -> Path:
    target = args.out or os.environ.get(ENV_OUT_DIR)
    if not target:
        raise ConfigError(f"no output directory: pass --out or set {ENV_OUT_DIR}")
    path = Path(target)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_config(payload: dict) -> int:
    print(json.dumps(payload, indent=2))
    return 0


# --- scenario io -------------------------------------------------------


def _write_split(path: Path, split: str, config_hash: str, images) -> None:
    header = {
        "format_version": formats.FORMAT_VERSION,
        "kind": "image_records",
        "split": split,
        "config_hash": config_hash,
    }
    formats.write_jsonl(path, header, (formats.image_record_to_dict(img) for img in images))


def _load_split(path: Path) -> tuple[dict, list[ImageRecord]]:
    header, records = formats.read_jsonl(path)
    if header.get("kind") != "image_records":
        raise FormatError(f"{path}: expected image_records, got {header.get('kind')!r}")
    return header, [formats.image_record_from_dict(r) for r in records]


def load_scenario(scenario_dir: str | Path) -> tuple[dict, list[ImageRecord], list[ImageRecord]]:
    """Manifest plus train and test splits, with cross-checked hashes."""
    scenario_dir = Path(scenario_dir)
    manifest = formats.load_json(scenario_dir / "manifest.json")
    formats.check_version(manifest, str(scenario_dir / "manifest.json"))
    if manifest.get("kind") != "scenario_manifest":
        raise FormatError(f"{scenario_dir}: manifest has kind {manifest.get('kind')!r}")
    splits = {}
    for split in ("train", "test"):
        header, images = _load_split(scenario_dir / f"{split}.jsonl")
        if header.get("config_hash") != manifest["config_hash"]:
            raise ManifestMismatch(f"{split}.jsonl does not belong to this manifest")
        splits[split] = images
    return manifest, splits["train"], splits["test"]


# --- simulate ----------------------------------------------------------


def _count_truths(images, visibility: str) -> int:
    return sum(1 for img in images for t in img.truths if t.visibility == visibility)


def cmd_simulate(args) -> int:
    if args.config:
        config = formats.scenario_config_from_dict(formats.load_json(args.config), args.config)
    else:
        config = ScenarioConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    config_dict = formats.scenario_config_to_dict(config)
    if args.print_config:
        return _print_config(config_dict)
    out = _out_dir(args)
    scenario = generate_scenario(config)
    chash = formats.config_hash(config_dict)
    manifest = {
        "format_version": formats.FORMAT_VERSION,
        "kind": "scenario_manifest",
        "config": config_dict,
        "config_hash": chash,
        "counts": {
            "train_images": len(scenario.train),
            "test_images": len(scenario.test),
            "train_annotated_truths": _count_truths(scenario.train, ANNOTATED),
            "train_hidden_truths": _count_truths(scenario.train, HIDDEN),
            "test_known_truths": _count_truths(scenario.test, ANNOTATED),
            "test_unknown_truths": _count_truths(scenario.test, HIDDEN),
        },
    }
    formats.dump_json(out / "manifest.json", manifest)
    _write_split(out / "train.jsonl", "train", chash, scenario.train)
    _write_split(out / "test.jsonl", "test", chash, scenario.test)
    print(f"scenario {chash} written to {out}")
    return 0


# --- train -------------------------------------------------------------


def _resolve_train_config(args) -> TrainConfig:
    if args.config:
        config = formats.train_config_from_dict(formats.load_json(args.config), args.config)
    else:
        config = TrainConfig()
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    if args.iterations is not None:
        overrides["iterations"] = tuple(args.iterations)
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if getattr(args, "lambda_", None) is not None:
        overrides["lambda_"] = args.lambda_
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return replace(config, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_audit(path: Path, scenario_hash: str, passes) -> None:
    header = {
        "format_version": formats.FORMAT_VERSION,
        "kind": "pseudo_label_audit",
        "scenario_hash": scenario_hash,
        "passes": [
            {"pass": p.index, "tau_obj": formats.tau_to_dict(p.tau)} for p in passes
        ],
    }
    records = []
    for p in passes:
        for image_id in sorted(p.labels):
            records.append(
                {
                    "pass": p.index,
                    "image_id": image_id,
                    "pseudo_labels": [
                        formats.pseudo_label_to_dict(pl) for pl in p.labels[image_id]
                    ],
                }
            )
    formats.write_jsonl(path, header, records)


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    if args.print_config:
        return _print_config(formats.train_config_to_dict(config))
    manifest, train_images, _ = load_scenario(args.scenario)
    out = _out_dir(args)
    scenario_config = formats.scenario_config_from_dict(manifest["config"])
    result = run_four_step(
        train_images,
        num_known_classes=scenario_config.num_known_classes,
        feature_dim=scenario_config.feature_dim,
        config=config,
    )
    formats.dump_json(
        out / "model.json",
        formats.model_to_dict(result.detector, config.mode, manifest["config_hash"], config),
    )
    trace_lines = [f"# format_version={formats.FORMAT_VERSION} kind=loss_trace", "step,loss"]
    trace_lines += [f"{step},{loss!r}" for step, loss in result.detector.trace]
    (out / "loss_trace.csv").write_text("\n".join(trace_lines) + "\n")
    if config.mode == "unkad":
        _write_audit(out / "pseudo_labels.jsonl", manifest["config_hash"], result.passes)
    n_pseudo = sum(len(v) for p in result.passes for v in p.labels.values())
    print(f"model written to {out / 'model.json'} (mode={config.mode}, pseudo-labels={n_pseudo})")
    return 0


# --- pseudo-label (standalone audit) ------------------------------------


def cmd_pseudo_label(args) -> int:
    detector, mode, scenario_hash, _ = formats.model_from_dict(
        formats.load_json(args.model), args.model
    )
    manifest, train_images, _ = load_scenario(args.scenario)
    _check_compat(detector, manifest)
    lambda_ = args.lambda_ if args.lambda_ is not None else (
        detector.tau_obj.lambda_ if detector.tau_obj else simworld.DEFAULT_LAMBDA
    )
    if args.print_config:
        return _print_config({"model": str(args.model), "lambda": lambda_})
    out = _out_dir(args)
    tau, labels = pseudo_label_pass(detector, train_images, lambda_)
    _write_audit(
        out / "pseudo_labels.jsonl",
        manifest["config_hash"],
        [simworld.PseudoLabelPass(0, tau, labels)],
    )
    total = sum(len(v) for v in labels.values())
    print(f"audit written to {out / 'pseudo_labels.jsonl'} ({total} pseudo-labels, tau={tau.value:.6f})")
    return 0


# --- evaluate ----------------------------------------------------------


def _check_compat(detector: ToyDetector, manifest: dict) -> None:
    config = manifest["config"]
    if detector.feature_dim != config["feature_dim"]:
        raise ConfigError(
            f"model feature width {detector.feature_dim} does not match "
            f"scenario feature_dim {config['feature_dim']}"
        )
    if detector.label_space.num_known != config["num_known_classes"]:
        raise ConfigError(
            f"model has {detector.label_space.num_known} known classes, "
            f"scenario has {config['num_known_classes']}"
        )


def _rejection_from_args(args) -> RejectionConfig:
    try:
        return RejectionConfig(
            strategy=args.rejection,
            tau_msp=args.tau_msp,
            tau_energy=args.tau_energy,
            tau_odin=args.tau_odin,
            temperature=args.temperature,
            epsilon=args.epsilon,
            energy_direction=args.energy_direction,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def evaluate_images(
    detector: ToyDetector,
    images,
    rejection_config: RejectionConfig,
    iou_threshold: float,
    nms_iou: float,
    threads: int = 1,
):
    """Score, reject, and count every image; returns (scored, detections,
    merged counts, per-class AP, avg-obj pair, pr-curve rows)."""
    space = detector.label_space
    tau = detector.tau_obj.value if detector.tau_obj is not None else 1.0
    oracle = gradient_oracle(detector)

    def run_one(img):
        scored = detector.score(img)
        dets = apply_rejection(
            scored.proposals, rejection_config, detector, tau, space,
            oracle=oracle, nms_iou=nms_iou,
        )
        return scored, dets

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, images))
    else:
        results = [run_one(img) for img in images]

    scored_images = [r[0] for r in results]
    detections = {img.image_id: dets for img, (_, dets) in zip(images, results)}
    counts = metrics.merge_counts(
        metrics.confusion_counts(dets, img.truths, space, iou_threshold)
        for img, (_, dets) in zip(images, results)
    )
    per_class_ap = {}
    pr_rows = []
    eval_classes = list(space.known_classes) + [space.unknown_id]
    for class_id in eval_classes:
        dets_by = {
            img.image_id: [d for d in detections[img.image_id] if d.predicted_class == class_id]
            for img in images
        }
        truths_by = {
            img.image_id: [t for t in img.truths if t.class_id == class_id] for img in images
        }
        if space.is_known(class_id):
            per_class_ap[class_id] = metrics.average_precision_grouped(
                dets_by, truths_by, iou_threshold
            )
        for conf, rec, prec in metrics.pr_curve_points(dets_by, truths_by, iou_threshold):
            pr_rows.append((class_id, conf, rec, prec))
    known_probs, unknown_probs = truth_foreground_objectness(scored_images, space)
    avg_known = metrics.avg_obj(known_probs) if known_probs else None
    avg_unknown = metrics.avg_obj(unknown_probs) if unknown_probs else None
    return scored_images, detections, counts, per_class_ap, (avg_known, avg_unknown), pr_rows


def cmd_evaluate(args) -> int:
    rejection_config = _rejection_from_args(args)
    resolved = rejection_config.resolved()
    if args.print_config:
        return _print_config(
            {
                "rejection": formats.rejection_config_to_dict(resolved),
                "iou_threshold": args.iou_threshold,
                "nms_iou": args.nms_iou,
                "threads": args.threads,
            }
        )
    detector, mode, _, _ = formats.model_from_dict(formats.load_json(args.model), args.model)
    manifest, _, test_images = load_scenario(args.scenario)
    _check_compat(detector, manifest)
    out = _out_dir(args)

    _, detections, counts, per_class_ap, (avg_known, avg_unknown), pr_rows = evaluate_images(
        detector, test_images, rejection_config, args.iou_threshold, args.nms_iou, args.threads
    )

    config_echo = {
        "training_mode": mode,
        "rejection": formats.rejection_config_to_dict(resolved),
        "iou_threshold": args.iou_threshold,
        "nms_iou": args.nms_iou,
        "scenario_hash": manifest["config_hash"],
        "tau_obj": None if detector.tau_obj is None else formats.tau_to_dict(detector.tau_obj),
    }
    report = metrics.build_report(counts, per_class_ap, avg_known, avg_unknown, config_echo)

    header = {
        "format_version": formats.FORMAT_VERSION,
        "kind": "detections",
        "scenario_hash": manifest["config_hash"],
        "training_mode": mode,
        "rejection": formats.rejection_config_to_dict(resolved),
        "iou_threshold": args.iou_threshold,
        "nms_iou": args.nms_iou,
    }
    formats.write_jsonl(
        out / "detections.jsonl",
        header,
        (
            {
                "image_id": img.image_id,
                "detections": [formats.detection_to_dict(d) for d in detections[img.image_id]],
            }
            for img in test_images
        ),
    )
    wrapper = {
        "format_version": formats.FORMAT_VERSION,
        "kind": "evaluation_report",
        "scenario_hash": manifest["config_hash"],
        "training_mode": mode,
        "rejection_strategy": resolved.strategy,
        "report": formats.report_to_dict(report),
    }
    formats.dump_json(out / "report.json", wrapper)
    table = formats.render_table(
        [formats.report_table_row(mode, resolved.strategy, formats.report_to_dict(report))]
    )
    (out / "report.txt").write_text(formats.TABLE_VERSION_LINE + table)
    pr_lines = [f"# format_version={formats.FORMAT_VERSION} kind=pr_curves", "class_id,confidence,recall,precision"]
    pr_lines += [f"{cid},{conf!r},{rec!r},{prec!r}" for cid, conf, rec, prec in pr_rows]
    (out / "pr_curves.csv").write_text("\n".join(pr_lines) + "\n")
    print(table, end="")
    return 0


# --- report ------------------------------------------------------------


def cmd_report(args) -> int:
    rows = []
    scenario_hash = None
    for path in args.reports:
        wrapper = formats.load_json(path)
        formats.check_version(wrapper, str(path))
        if wrapper.get("kind") != "evaluation_report":
            raise FormatError(f"{path}: expected evaluation_report, got {wrapper.get('kind')!r}")
        if scenario_hash is None:
            scenario_hash = wrapper["scenario_hash"]
        elif wrapper["scenario_hash"] != scenario_hash:
            raise ManifestMismatch(
                f"{path}: scenario {wrapper['scenario_hash']} differs from {scenario_hash}"
            )
        rows.append(
            formats.report_table_row(
                wrapper["training_mode"], wrapper["rejection_strategy"], wrapper["report"]
            )
        )
    table = formats.render_table(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(formats.TABLE_VERSION_LINE + table)
    print(table, end="")
    return 0


# --- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unkad", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_common(p):
        p.add_argument("--out", help=f"output directory (default: ${ENV_OUT_DIR})")
        p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")

    p = sub.add_parser("simulate", help="generate a seeded synthetic scenario")
    p.add_argument("--config", help="scenario config JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run the four-step alternating schedule")
    p.add_argument("--scenario", required=True, help="scenario directory")
    p.add_argument("--config", help="train config JSON file")
    p.add_argument("--mode", choices=simworld.MODES)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--iterations", type=int, nargs=4, metavar=("S1", "S2", "S3", "S4"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lambda", type=float, dest="lambda_", help="objectness threshold multiplier")
    p.add_argument("--seed", type=int)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label", help="standalone pseudo-label audit for a model + scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", required=True, help="model.json path")
    p.add_argument("--lambda", type=float, dest="lambda_")
    add_common(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("evaluate", help="run inference + open-set metrics on the test split")
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", required=True, help="model.json path")
    p.add_argument("--rejection", default="none", choices=["none", "direct", "msp", "energy", "odin"])
    p.add_argument("--tau-msp", type=float, default=0.5, dest="tau_msp")
    p.add_argument("--tau-energy", type=float, default=None, dest="tau_energy")
    p.add_argument("--tau-odin", type=float, default=0.4, dest="tau_odin")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--energy-direction", default="negative_energy",
                   choices=["literal_eq6", "negative_energy"], dest="energy_direction")
    p.add_argument("--iou-threshold", type=float, default=metrics.DEFAULT_IOU_THRESHOLD,
                   dest="iou_threshold", help="matching threshold for all metrics")
    p.add_argument("--nms-iou", type=float, default=DEFAULT_NMS_IOU, dest="nms_iou")
    p.add_argument("--threads", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="combine evaluation reports into one comparison table")
    p.add_argument("reports", nargs="+", help="report.json paths (same scenario)")
    p.add_argument("--out", help="optional output file for the table")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except (ConfigError, FormatError, ManifestMismatch, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ArithmeticError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
