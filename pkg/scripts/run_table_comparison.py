#!/usr/bin/env python3
"""End-to-end comparison run: both training modes, every rejection strategy.

Simulates a scenario, trains the standard and unknown-aware detectors on
it, evaluates each applicable rejection strategy, and prints the combined
comparison table. Everything is seeded; rerunning reproduces the same
numbers.

Usage: run_table_comparison.py [--seed N] [--out DIR]

ODIN is evaluated at temperature 2 here: with the default temperature of
1000 the temperature-scaled softmax is nearly uniform, so its fixed 0.4
threshold rejects every region on a small label space.
"""

import argparse
import sys
import tempfile
from pathlib import Path

from unkad.cli import main as unkad


def run(argv):
    code = unkad(argv)
    if code != 0:
        raise SystemExit(f"command failed ({code}): {' '.join(argv)}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="working directory (default: temporary)")
    args = parser.parse_args()

    workdir = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="unkad-demo-"))
    workdir.mkdir(parents=True, exist_ok=True)
    scen = workdir / "scenario"

    run(["simulate", "--seed", str(args.seed), "--out", str(scen)])
    for mode in ("standard", "unkad"):
        run(["train", "--scenario", str(scen), "--mode", mode,
             "--seed", str(args.seed), "--out", str(workdir / mode)])

    table_rows = []
    for mode, strategies in (
        ("standard", ["none", "msp", "energy", "odin"]),
        ("unkad", ["none", "msp", "energy", "odin", "direct"]),
    ):
        for strategy in strategies:
            out = workdir / f"eval-{mode}-{strategy}"
            argv = ["evaluate", "--scenario", str(scen),
                    "--model", str(workdir / mode / "model.json"),
                    "--rejection", strategy, "--out", str(out)]
            if strategy == "odin":
                argv += ["--temperature", "2"]
            run(argv)
            table_rows.append(str(out / "report.json"))

    print()
    run(["report", *table_rows, "--out", str(workdir / "comparison.txt")])
    print(f"\nartifacts in {workdir}")


if __name__ == "__main__":
    sys.exit(main())
