#!/usr/bin/env python3
"""Run the bundled desk-scale benchmark (ERM vs FOND, High setting).

Trains both variants for five paired repetitions on the bundled
synthetic dataset, prints the aggregate table, and reports the
per-repetition linked-class comparison.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fond import cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk_high", help="output directory")
    parser.add_argument("--config", default=str(ROOT / "configs" / "desk_high.json"))
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    code = cli.main(["benchmark", "--config", args.config, "--out", args.out,
                     "--jobs", str(args.jobs)])
    if code != 0:
        return code

    doc = json.loads((Path(args.out) / "benchmark.json").read_text())
    by_variant: dict[str, dict[int, float]] = {}
    for cell in doc["cells"]:
        by_variant.setdefault(cell["variant"], {})[cell["rep"]] = cell["y_l"]
    if {"erm", "fond"} <= set(by_variant):
        wins = 0
        print("\nper-repetition linked-class accuracy (target domain):")
        for rep in sorted(by_variant["erm"]):
            erm = by_variant["erm"][rep]
            fond = by_variant["fond"][rep]
            mark = "+" if fond > erm else "-"
            wins += fond > erm
            print(f"  rep {rep}: erm {erm:.4f}  fond {fond:.4f}  [{mark}]")
        print(f"fond improves linked-class accuracy in {wins}/{len(by_variant['erm'])} repetitions")
    return 0


if __name__ == "__main__":
    sys.exit(main())
