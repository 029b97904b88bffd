"""Print the noise-robustness and recording-length tables of a trained run.

Runs ``cortical-ssm eval`` on an existing output directory (one with checkpoints)
and tabulates metrics/snr_sweep.csv and metrics/length_sweep.csv, averaged over folds.
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from cortical_ssm.cli import EXIT_OK, main


def table(path: Path, key: str) -> None:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    groups = defaultdict(list)
    for r in rows:
        groups[float(r[key])].append(r)
    extra = "clipped" in rows[0]
    print(f"\n{key:>15s} {'acc':>7s} {'F1':>7s} {'AUROC':>7s}" + ("  clipped" if extra else ""))
    for k in sorted(groups):
        g = groups[k]
        mean = {m: np.mean([float(r[m]) for r in g]) for m in ("accuracy", "macro_f1", "auroc_macro")}
        line = f"{k:15g} {mean['accuracy']:7.2f} {mean['macro_f1']:7.2f} {mean['auroc_macro']:7.2f}"
        if extra:
            line += f"  {sum(int(r['clipped']) for r in g):7d}"
        print(line)


def run():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path("configs/synthetic.json"))
    p.add_argument("--out", type=Path, default=Path("runs/synthetic"))
    p.add_argument("--folds", default=None)
    args = p.parse_args()
    argv = ["eval", "--config", str(args.config), "--out", str(args.out)]
    if args.folds:
        argv += ["--folds", args.folds]
    rc = main(argv)
    if rc != EXIT_OK:
        return rc
    table(args.out / "metrics" / "snr_sweep.csv", "degradation_db")
    table(args.out / "metrics" / "length_sweep.csv", "length")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
