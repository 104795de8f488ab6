#!/usr/bin/env python3
"""Component-removal study on the 10-class digits set (5 tasks x 2 classes).

Runs the full method plus the no_rkd / no_hkd / no_chr variants over three
seeds each and prints a comparison table of last and average incremental
accuracy. A fresh sweep takes roughly an hour on one CPU core; rerunning
with the same --out resumes every finished run from its checkpoints.
"""

import argparse
import sys
from pathlib import Path

from dfcil import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/digits-ablation",
                        help="sweep directory (default: runs/digits-ablation)")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "ablation-config.yaml"
    config_path.write_text("preset: digits-desk\n")

    argv = ["ablate", "--config", str(config_path),
            "--seeds", *[str(s) for s in args.seeds], "--out", str(out)]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
