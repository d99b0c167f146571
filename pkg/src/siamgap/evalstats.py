"""Evaluation battery: confusion metrics, Cohen's kappa, McNemar, ROC/AUC, confidence curves.

KL-2 (class 1) is the positive class throughout.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .confidence import GRADES
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    kappa: float | None = None
    mcnemar_p: float | None = None
    auc: float | None = None

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        d = asdict(self)
        d["n"] = self.n
        return d


def _binary(x, name):
    arr = np.asarray(x).astype(int).reshape(-1)
    if np.any((arr != 0) & (arr != 1)):
        raise DataError(f"{name} must be 0/1 class indices")
    return arr


def _ratio(num, den):
    return num / den if den else 0.0


def confusion_metrics(predictions, labels):
    pred = _binary(predictions, "predictions")
    true = _binary(labels, "labels")
    if pred.size == 0 or pred.size != true.size:
        raise DataError("predictions and labels must be equal-length and non-empty")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    if tp + fp + fn == 0:
        log.warning("no positive predictions or labels; F1 reported as 0")
    return MetricsReport(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=(tp + tn) / pred.size,
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
    )


def cohens_kappa(rater_a, rater_b):
    """Unweighted kappa. Returns 1 when both raters are constant and identical."""
    a = np.asarray(rater_a).reshape(-1)
    b = np.asarray(rater_b).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise DataError("kappa needs two equal-length, non-empty rating lists")
    cats = np.union1d(a, b)
    p_o = float(np.mean(a == b))
    p_e = float(sum(np.mean(a == c) * np.mean(b == c) for c in cats))
    if p_e >= 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def discordant_counts(correct_a, correct_b):
    a = np.asarray(correct_a, dtype=bool).reshape(-1)
    b = np.asarray(correct_b, dtype=bool).reshape(-1)
    if a.size != b.size:
        raise DataError("McNemar needs equal-length correctness lists")
    return int(np.sum(a & ~b)), int(np.sum(~a & b))


def mcnemar_exact(correct_a, correct_b):
    """Two-sided exact McNemar p-value from per-sample correctness of two raters."""
    b, c = discordant_counts(correct_a, correct_b)
    return mcnemar_exact_counts(b, c)


def mcnemar_exact_counts(b, c):
    n = b + c
    if n == 0:
        return 1.0
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


def mcnemar_chi2(correct_a, correct_b):
    """Continuity-corrected chi-square McNemar p-value (1 dof)."""
    b, c = discordant_counts(correct_a, correct_b)
    if b + c == 0:
        return 1.0
    stat = (abs(b - c) - 1.0) ** 2 / (b + c)
    return math.erfc(math.sqrt(max(stat, 0.0) / 2.0))


def roc_auc(scores, labels):
    """ROC points ``(fpr, tpr, threshold)`` and the rank-statistic AUC (ties count half)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    if s.size != y.size:
        raise DataError("scores and labels must have equal length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC/AUC needs both classes present")

    # Mann-Whitney U via midranks
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u / (n_pos * n_neg)

    points = [(0.0, 0.0, math.inf)]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        tpr = float(np.sum(pred & (y == 1))) / n_pos
        fpr = float(np.sum(pred & (y == 0))) / n_neg
        points.append((fpr, tpr, float(t)))
    return points, float(auc)


def confidence_curve(scores):
    """Per grade, confidences sorted descending as ``[(rank, confidence), ...]``."""
    out = {g: [] for g in GRADES}
    for s in scores:
        out.setdefault(s.grade, []).append(s.confidence)
    return {g: list(enumerate(sorted(v, reverse=True))) for g, v in out.items()}


def overconfidence_fraction(scores, threshold=0.99):
    vals = np.asarray([getattr(s, "confidence", s) for s in scores], dtype=np.float64)
    if vals.size == 0:
        return 0.0
    return float(np.mean(vals > threshold))


# ------------------------------------------------------------------- export

def write_metrics_json(report: MetricsReport, path, extra=None):
    d = report.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_roc_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, t in points:
            w.writerow([repr(fpr), repr(tpr), "inf" if math.isinf(t) else repr(t)])


def write_confidence_curve_csv(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["grade", "rank", "confidence"])
        for grade in GRADES:
            for rank, conf in curve.get(grade, []):
                w.writerow([grade, rank, repr(conf)])
