"""Ranking metrics for mislabel identification: AP (reported as mAP), ROC AUC, Precision@95.

Thresholds are the distinct score values in descending order; tied scores
enter the prediction set together. AP is accumulated in exact rational
arithmetic, so the result is the correctly rounded value of the step sum.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from dyndetect.errors import InvalidArgumentError, UndefinedMetricError

REPORT_FIELDS = ("method", "noise_kind", "noise_ratio", "map", "roc_auc", "precision_at_95")


def _prepare(scores, flags):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = np.asarray(flags).reshape(-1)
    if s.shape != k.shape:
        raise InvalidArgumentError(f"scores and flags differ in length ({s.size} vs {k.size})")
    if not np.isin(k, (0, 1)).all():
        raise InvalidArgumentError("flags must be 0/1")
    if not np.isfinite(s).all():
        raise InvalidArgumentError("scores must be finite")
    return s, k.astype(np.int64)


def threshold_counts(scores, flags):
    """Cumulative (true positives, predicted positives) at each distinct threshold, high to low."""
    s, k = _prepare(scores, flags)
    order = np.argsort(-s, kind="mergesort")
    s, k = s[order], k[order]
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(k)[ends]
    predicted = ends + 1
    return s[ends], tp, predicted


def average_precision(scores, flags) -> float:
    """``sum_n (R_n - R_{n-1}) * P_n`` over the descending threshold groups."""
    _, k = _prepare(scores, flags)
    positives = int(k.sum())
    if positives == 0:
        raise UndefinedMetricError("average precision is undefined without positive flags")
    _, tp, predicted = threshold_counts(scores, flags)
    prev = np.r_[0, tp[:-1]]
    total = Fraction(0)
    for gained, hit, size in zip((tp - prev).tolist(), tp.tolist(), predicted.tolist()):
        if gained:
            total += Fraction(gained * hit, size)
    return float(total / positives)


def roc_auc(scores, flags) -> float:
    """Area under the ROC curve, i.e. ``P(s_pos > s_neg) + 0.5 * P(s_pos == s_neg)``."""
    s, k = _prepare(scores, flags)
    pos = int(k.sum())
    neg = k.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative flag")
    # average ranks are multiples of 1/2, so twice the rank sum is an exact integer
    twice_rank_sum = int(round(2.0 * rankdata(s, method="average")[k == 1].sum()))
    twice_u = twice_rank_sum - pos * (pos + 1)
    return float(Fraction(twice_u, 2 * pos * neg))


def roc_curve(scores, flags) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(FPR, TPR, thresholds) with a leading (0, 0) point."""
    thresholds, tp, predicted = threshold_counts(scores, flags)
    _, k = _prepare(scores, flags)
    pos = k.sum()
    neg = k.size - pos
    fp = predicted - tp
    return np.r_[0.0, fp / max(neg, 1)], np.r_[0.0, tp / max(pos, 1)], thresholds


def precision_recall_curve(scores, flags) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(precision, recall, thresholds), one entry per threshold group, highest threshold first."""
    thresholds, tp, predicted = threshold_counts(scores, flags)
    _, k = _prepare(scores, flags)
    return tp / predicted, tp / max(k.sum(), 1), thresholds


def precision_at_recall(scores, flags, target: float = 0.95) -> float:
    """Precision of the smallest threshold-group prediction set whose recall reaches ``target``."""
    if not 0.0 < target <= 1.0:
        raise InvalidArgumentError("target recall must be in (0, 1]")
    _, k = _prepare(scores, flags)
    positives = int(k.sum())
    if positives == 0:
        raise UndefinedMetricError("precision at recall is undefined without positive flags")
    _, tp, predicted = threshold_counts(scores, flags)
    recall = tp / positives
    n = int(np.argmax(recall >= target))
    return float(tp[n] / predicted[n])


@dataclass(frozen=True)
class EvalReport:
    map: float
    roc_auc: float
    precision_at_95: float
    method: str = "detector"
    noise_kind: str = ""
    noise_ratio: float | None = None

    def row(self) -> dict:
        return {
            "method": self.method,
            "noise_kind": self.noise_kind,
            "noise_ratio": "" if self.noise_ratio is None else f"{self.noise_ratio:g}",
            "map": f"{self.map:.6f}",
            "roc_auc": f"{self.roc_auc:.6f}",
            "precision_at_95": f"{self.precision_at_95:.6f}",
        }


def evaluate(scores, flags, method: str = "detector", noise_kind: str = "", noise_ratio: float | None = None) -> EvalReport:
    return EvalReport(
        map=average_precision(scores, flags),
        roc_auc=roc_auc(scores, flags),
        precision_at_95=precision_at_recall(scores, flags, 0.95),
        method=method,
        noise_kind=noise_kind,
        noise_ratio=noise_ratio,
    )


def reports_to_csv(reports, path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.row())
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text
