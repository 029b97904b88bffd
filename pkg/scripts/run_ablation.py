"""Train every front-end and module ablation variant and print the grid.

Expects a dataset already written by ``cortical-ssm synth`` (or pass --dataset).
"""

import argparse
import csv
import sys
from pathlib import Path

from cortical_ssm.cli import EXIT_OK, main


def run():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path("configs/synthetic.json"))
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--dataset", default=None)
    p.add_argument("--folds", default="0")
    args = p.parse_args()

    argv = ["--config", str(args.config), "--out", str(args.out), "--folds", args.folds]
    if args.dataset is None and not (args.out / "dataset.bin").exists():
        rc = main(["synth", *argv])
        if rc != EXIT_OK:
            return rc
    if args.dataset is not None:
        argv += ["--dataset", args.dataset]
    rc = main(["ablate", *argv])
    if rc != EXIT_OK:
        return rc
    with open(args.out / "metrics" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"\n{'variant':18s} {'params':>9s} {'acc':>7s} {'F1':>7s} {'AUROC':>7s} {'kappa':>7s}")
    for r in rows:
        print(f"{r['variant']:18s} {int(r['n_parameters']):9d} {float(r['accuracy_mean']):7.2f} "
              f"{float(r['macro_f1_mean']):7.2f} {float(r['auroc_macro_mean']):7.2f} {float(r['kappa_mean']):7.3f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
