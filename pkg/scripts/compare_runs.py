"""Paired Wilcoxon signed-rank test between the per-fold test metrics of two runs."""

import argparse
import json
import sys
from pathlib import Path

from cortical_ssm.cli import METRIC_KEYS
from cortical_ssm.metrics import wilcoxon_signed_rank


def fold_metrics(run: Path) -> dict[int, dict]:
    summary = json.loads((run / "summary.json").read_text())
    return {f["fold"]: f["metrics"] for f in summary["folds"]}


def run():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("run_a", type=Path)
    p.add_argument("run_b", type=Path)
    args = p.parse_args()
    a, b = fold_metrics(args.run_a), fold_metrics(args.run_b)
    folds = sorted(set(a) & set(b))
    if not folds:
        print("no folds in common", file=sys.stderr)
        return 2
    print(f"{len(folds)} paired folds")
    for k in METRIC_KEYS:
        r = wilcoxon_signed_rank([a[f][k] for f in folds], [b[f][k] for f in folds])
        print(f"  {k:12s} W+={r.statistic:6.1f}  p={r.p_value:.4f}  ({r.method})")
    return 0


if __name__ == "__main__":
    sys.exit(run())
