"""Classification metrics and the Wilcoxon signed-rank test.

Accuracy, F1, AUROC and AUPRC are reported in percent; kappa is unitless.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CSV_COLUMNS = ("fold", "accuracy", "macro_f1", "auroc", "auprc", "kappa")
EXACT_MAX_K = 12


@dataclass
class PredictionSet:
    scores: np.ndarray  # [n, N]
    labels: np.ndarray  # [n]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.scores.ndim != 2 or len(self.scores) != len(self.labels):
            raise ValueError("scores must be [n, N] with one label per row")
        if np.any(self.labels < 0) or np.any(self.labels >= self.scores.shape[1]):
            raise ValueError("labels out of range")

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def predictions(self) -> np.ndarray:
        return self.scores.argmax(axis=1)


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    auroc_macro: float
    auprc_macro: float
    kappa: float
    per_class_f1: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def row(self, fold) -> list:
        return [fold, self.accuracy, self.macro_f1, self.auroc_macro, self.auprc_macro, self.kappa]


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def confusion_and_f1(preds: PredictionSet) -> tuple[np.ndarray, np.ndarray, float]:
    """Rows are true classes, columns predictions. F1 values in percent."""
    cm = confusion_matrix(preds.labels, preds.predictions, preds.n_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    f1 = np.array([100.0 * f1_from_counts(*c) for c in zip(tp, fp, fn)])
    if np.any(cm.sum(axis=1) == 0):
        log.warning("classes %s have no true samples; their F1 is 0", np.flatnonzero(cm.sum(axis=1) == 0).tolist())
    return cm, f1, float(f1.mean())


def cohens_kappa(confusion) -> float:
    cm = np.asarray(confusion, dtype=float)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    po = np.trace(cm) / total
    pe = float((cm.sum(axis=0) * cm.sum(axis=1)).sum() / total ** 2)
    if pe >= 1.0:
        log.warning("expected agreement is 1; kappa defined as 0")
        return 0.0
    return float((po - pe) / (1.0 - pe))


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auroc(scores, positive) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n1, n0 = positive.sum(), (~positive).sum()
    if n1 == 0 or n0 == 0:
        return float("nan")
    r = midranks(scores)
    return float((r[positive].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def binary_auprc(scores, positive) -> float:
    """Step-wise average precision: sum over thresholds of (recall gain) * precision."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n1 = positive.sum()
    if n1 == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    # one operating point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(p)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n1
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _macro(preds: PredictionSet, fn) -> float:
    if preds.n_classes == 2:
        return 100.0 * fn(preds.scores[:, 1], preds.labels == 1)
    vals = []
    for c in range(preds.n_classes):
        if not np.any(preds.labels == c):
            log.warning("class %d absent from labels; skipped in macro average", c)
            continue
        vals.append(fn(preds.scores[:, c], preds.labels == c))
    return 100.0 * float(np.mean(vals)) if vals else float("nan")


def auroc_macro(preds: PredictionSet) -> float:
    """One-vs-rest macro AUROC in percent; the single binary AUROC when N = 2."""
    return _macro(preds, binary_auroc)


def auprc_macro(preds: PredictionSet) -> float:
    """One-vs-rest macro average precision in percent; positive class 1 when N = 2."""
    if preds.n_classes == 2:
        vals = [binary_auprc(preds.scores[:, c], preds.labels == c) for c in (0, 1)
                if np.any(preds.labels == c)]
        return 100.0 * float(np.mean(vals))
    return _macro(preds, binary_auprc)


def evaluate(preds: PredictionSet) -> MetricsReport:
    cm, f1, macro = confusion_and_f1(preds)
    acc = 100.0 * np.trace(cm) / cm.sum()
    return MetricsReport(float(acc), macro, auroc_macro(preds), auprc_macro(preds), cohens_kappa(cm),
                         f1.tolist(), cm.tolist())


def write_metrics_csv(path: str | Path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r)


@dataclass
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    n: int
    method: str  # exact | normal | degenerate
    degenerate: bool = False


def _exact_upper_tail(ranks: np.ndarray, w: float) -> tuple[float, float]:
    """P(W+ >= w) and P(W+ <= w) under random signs, by counting subsets of doubled ranks."""
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in r2:
        counts[r:] = counts[r:] + counts[:-r].copy() if r > 0 else counts
    w2 = int(round(2 * w))
    n_all = 2 ** len(ranks)
    ge = sum(counts[w2:])
    le = sum(counts[:w2 + 1])
    return float(ge) / n_all, float(le) / n_all


def wilcoxon_signed_rank(a, b, exact: bool | None = None) -> WilcoxonResult:
    """Two-sided paired test. Zero differences are dropped; ties share average ranks.

    Exact enumeration of the null for up to 12 non-zero pairs, otherwise the
    normal approximation with tie and continuity corrections.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", True)
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if exact is None:
        exact = n <= EXACT_MAX_K
    if exact:
        upper, lower = _exact_upper_tail(ranks, w_plus)
        return WilcoxonResult(w_plus, min(1.0, 2 * min(upper, lower)), n, "exact")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    if var <= 0:
        return WilcoxonResult(w_plus, 1.0, n, "degenerate", True)
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return WilcoxonResult(w_plus, min(1.0, p), n, "normal")
