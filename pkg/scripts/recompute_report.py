#!/usr/bin/env python3
"""Independent recomputation of an evaluation report from dump files.

Standalone on purpose: stdlib only, no imports from the package, so it
can serve as a cross-check oracle. Reads a scenario directory plus an
evaluation directory (detections.jsonl + report.json), recomputes every
metric from scratch, and fails loudly if anything disagrees beyond
1e-12 relative error.

Usage: recompute_report.py SCENARIO_DIR EVAL_DIR [--model MODEL_JSON]

With --model the foreground-objectness averages are recomputed too (the
forward pass is re-implemented here from the stored weights).
"""

import argparse
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

REL_TOL = 1e-12


def load_jsonl(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if str(header.get("format_version", "")).split(".")[0] != "1":
        raise SystemExit(f"{path}: unsupported format_version")
    return header, [json.loads(line) for line in lines[1:] if line]


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def greedy_match(dets, truths, thr):
    """Descending-confidence greedy matching; returns detection->truth map."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i]["confidence"], i))
    taken = [False] * len(truths)
    assignment = [None] * len(dets)
    for di in order:
        best, best_v = None, 0.0
        for ti, truth in enumerate(truths):
            if taken[ti]:
                continue
            v = iou(dets[di]["box"], truth["box"])
            if v >= thr and v > best_v:
                best, best_v = ti, v
        if best is not None:
            assignment[di] = best
            taken[best] = True
    return assignment, taken


def confusion_for_image(dets, truths, unknown_id, background_id, thr):
    known_dets = [d for d in dets if d["predicted_class"] not in (unknown_id, background_id)]
    unknown_dets = [d for d in dets if d["predicted_class"] == unknown_id]
    known_truths = [t for t in truths if t["class_id"] not in (unknown_id, background_id)]
    unknown_truths = [t for t in truths if t["class_id"] == unknown_id]
    tp_c = fp_c = tp_o = fp_o = 0
    assignment, _ = greedy_match(known_dets, known_truths, thr)
    for det, ti in zip(known_dets, assignment):
        if ti is not None:
            if known_truths[ti]["class_id"] == det["predicted_class"]:
                tp_c += 1
            else:
                fp_c += 1
        else:
            best_unknown = max((iou(det["box"], t["box"]) for t in unknown_truths), default=0.0)
            if best_unknown >= thr:
                fp_o += 1
            else:
                fp_c += 1
    u_assignment, u_taken = greedy_match(unknown_dets, unknown_truths, thr)
    tp_o += sum(1 for ti in u_assignment if ti is not None)
    fp_o += sum(1 for ti in u_assignment if ti is None)
    fn_o = sum(1 for flag in u_taken if not flag)
    return tp_c, fp_c, tp_o, fp_o, fn_o


def class_ap(dets_by_image, truths_by_image, thr):
    """All-point interpolated AP, matching confined to each image."""
    n_truths = sum(len(ts) for ts in truths_by_image.values())
    if n_truths == 0:
        return None
    ranked = []
    for image_id, dets in dets_by_image.items():
        for i, d in enumerate(dets):
            ranked.append((-d["confidence"], image_id, i))
    if not ranked:
        return 0.0
    ranked.sort()
    taken = {gid: [False] * len(ts) for gid, ts in truths_by_image.items()}
    tp_flags = []
    for _, image_id, di in ranked:
        det = dets_by_image[image_id][di]
        truths = truths_by_image.get(image_id, [])
        slots = taken.setdefault(image_id, [False] * len(truths))
        best, best_v = None, 0.0
        for ti, truth in enumerate(truths):
            if slots[ti]:
                continue
            v = iou(det["box"], truth["box"])
            if v >= thr and v > best_v:
                best, best_v = ti, v
        if best is not None:
            slots[best] = True
        tp_flags.append(best is not None)
    points = []
    tp = fp = 0
    for flag in tp_flags:
        tp += int(flag)
        fp += int(not flag)
        points.append((tp / n_truths, tp / (tp + fp)))
    # naive all-point integration: for every recall jump, weight the
    # maximum precision at or beyond that recall
    ap = 0.0
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        if recall == prev_recall:
            continue
        best_prec = max(p for r, p in points[i:])
        ap += (recall - prev_recall) * best_prec
        prev_recall = recall
    return ap


def compare(name, got, expected, failures):
    if expected is None and got is None:
        return
    if (expected is None) != (got is None):
        failures.append(f"{name}: recomputed {got!r} vs report {expected!r}")
        return
    scale = max(1.0, abs(expected))
    if abs(got - expected) > REL_TOL * scale:
        failures.append(f"{name}: recomputed {got!r} vs report {expected!r}")


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def avg_objectness(model, images, unknown_id):
    w = model["objectness"]["weights"]
    b = model["objectness"]["bias"]
    known, unknown = [], []
    for img in images:
        for t in img["truths"]:
            best, best_v = None, 0.0
            for p in img["proposals"]:
                v = iou(t["box"], p["box"])
                if v > best_v:
                    best, best_v = p, v
            if best is None:
                continue
            score = sigmoid(math.fsum(wi * xi for wi, xi in zip(w, best["features"])) + b)
            (unknown if t["class_id"] == unknown_id else known).append(score)
    mean = lambda xs: math.fsum(xs) / len(xs) if xs else None
    return mean(known), mean(unknown)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario_dir")
    ap.add_argument("eval_dir")
    ap.add_argument("--model", help="model.json for recomputing the objectness averages")
    args = ap.parse_args()

    manifest = json.loads((Path(args.scenario_dir) / "manifest.json").read_text())
    _, test_records = load_jsonl(Path(args.scenario_dir) / "test.jsonl")
    det_header, det_records = load_jsonl(Path(args.eval_dir) / "detections.jsonl")
    wrapper = json.loads((Path(args.eval_dir) / "report.json").read_text())
    report = wrapper["report"]
    thr = det_header["iou_threshold"]

    num_known = manifest["config"]["num_known_classes"]
    background_id, unknown_id = num_known, num_known + 1

    truths_by_image = {r["image_id"]: r["truths"] for r in test_records}
    dets_by_image = {r["image_id"]: r["detections"] for r in det_records}

    totals = [0, 0, 0, 0, 0]
    for image_id, truths in truths_by_image.items():
        parts = confusion_for_image(dets_by_image.get(image_id, []), truths,
                                    unknown_id, background_id, thr)
        totals = [a + b for a, b in zip(totals, parts)]
    tp_c, fp_c, tp_o, fp_o, fn_o = totals

    failures = []
    counts = report["counts"]
    for name, got in zip(("tp_c", "fp_c", "tp_o", "fp_o", "fn_o"), totals):
        if counts[name] != got:
            failures.append(f"counts.{name}: recomputed {got} vs report {counts[name]}")

    wi = None
    if tp_c + fp_c > 0 and tp_o + tp_c > 0:
        wi = float(Fraction(tp_c, tp_c + fp_c) * Fraction(tp_c + fp_c + tp_o + fp_o, tp_c + tp_o) - 1)
    wi_no_rej = float(Fraction(fp_o, tp_c + fp_c)) if tp_c + fp_c > 0 else None
    recall = tp_o / (tp_o + fn_o) if tp_o + fn_o > 0 else 0.0
    precision = tp_o / (tp_o + fp_o) if tp_o + fp_o > 0 else 0.0
    f1 = 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    compare("wi", wi, report["wi"], failures)
    compare("wi_no_rej", wi_no_rej, report["wi_no_rej"], failures)
    compare("u_recall_percent", 100 * recall, report["u_recall_percent"], failures)
    compare("u_precision_percent", 100 * precision, report["u_precision_percent"], failures)
    compare("u_f1_percent", 100 * f1, report["u_f1_percent"], failures)

    aps = {}
    for class_id in range(num_known):
        d_by = {gid: [d for d in dets_by_image.get(gid, []) if d["predicted_class"] == class_id]
                for gid in truths_by_image}
        t_by = {gid: [t for t in ts if t["class_id"] == class_id]
                for gid, ts in truths_by_image.items()}
        aps[class_id] = class_ap(d_by, t_by, thr)
        compare(f"per_class_ap[{class_id}]", aps[class_id],
                report["per_class_ap"][str(class_id)], failures)
    defined = [v for v in aps.values() if v is not None]
    mean_ap = 100 * math.fsum(defined) / len(defined) if defined else None
    compare("map_percent", mean_ap, report["map_percent"], failures)

    if args.model:
        model = json.loads(Path(args.model).read_text())
        avg_known, avg_unknown = avg_objectness(model, test_records, unknown_id)
        compare("avg_obj_known", avg_known, report["avg_obj_known"], failures)
        compare("avg_obj_unknown", avg_unknown, report["avg_obj_unknown"], failures)

    if failures:
        print("RECOMPUTATION MISMATCH")
        for f in failures:
            print(" ", f)
        return 1
    print(f"recomputation OK: counts={tuple(totals)} map={mean_ap} wi={wi}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
