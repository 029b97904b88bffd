"""Full pipeline on the synthetic motor-imagery task: synth, train, eval, explain.

    python scripts/run_synthetic.py --config configs/synthetic.json --out runs/synthetic --folds 0
"""

import argparse
import json
import sys
from pathlib import Path

from cortical_ssm.cli import EXIT_OK, main


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path("configs/synthetic.json"))
    p.add_argument("--out", type=Path, default=Path("runs/synthetic"))
    p.add_argument("--folds", default=None, help="comma-separated fold indices (default: all)")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def run():
    args = parse()
    common = ["--config", str(args.config), "--out", str(args.out), "--seed", str(args.seed)]
    if args.folds:
        common += ["--folds", args.folds]
    for cmd in ("synth", "train", "eval", "explain"):
        rc = main([cmd, *common])
        if rc != EXIT_OK:
            return rc
    summary = json.loads((args.out / "summary.json").read_text())["summary"]
    print("\nfold-averaged test metrics")
    for k, v in summary.items():
        print(f"  {k:12s} {v['mean']:8.3f} +- {v['std']:.3f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
