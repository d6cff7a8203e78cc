#!/usr/bin/env python3
"""Run the bundled tiny benchmark: all six variants, both settings, one
repetition each, with a one-trial hyperparameter search. Finishes in a
few seconds; useful as an end-to-end smoke test of the full protocol."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fond import cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/tiny_benchmark")
    parser.add_argument("--config", default=str(ROOT / "configs" / "tiny_benchmark.json"))
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    return cli.main(["benchmark", "--config", args.config, "--out", args.out,
                     "--jobs", str(args.jobs)])


if __name__ == "__main__":
    sys.exit(main())
