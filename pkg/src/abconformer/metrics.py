"""Binary and score-based evaluation metrics with degenerate-case flags,
plus threshold sweeps. All computations treat only masked-in positions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError

BCE_CLAMP = 1e-12


def _select(values, labels, mask):
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if values.shape != labels.shape:
        raise DataError("metric input length mismatch", module="metrics")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise DataError("metric mask length mismatch", module="metrics")
        values, labels = values[mask], labels[mask]
    return values, labels.astype(np.int64)


@dataclass(frozen=True)
class BinaryReport:
    tp: int
    fp: int
    fn: int
    tn: int
    iou: float
    prec: float
    rec: float
    f1: float
    mcc: float
    flags: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_metrics(calls, labels, mask=None) -> BinaryReport:
    """Confusion counts and the derived overlap metrics.

    Degenerate denominators yield 0 with the metric name flagged.
    """
    c, y = _select(calls, labels, mask)
    c = c.astype(np.int64)
    tp = int(np.sum((c == 1) & (y == 1)))
    fp = int(np.sum((c == 1) & (y == 0)))
    fn = int(np.sum((c == 0) & (y == 1)))
    tn = int(np.sum((c == 0) & (y == 0)))
    flags: dict = {}

    def ratio(name: str, num: float, den: float) -> float:
        if den == 0:
            flags[name] = True
            return 0.0
        return num / den

    iou = ratio("iou", tp, tp + fp + fn)
    prec = ratio("prec", tp, tp + fp)
    rec = ratio("rec", tp, tp + fn)
    f1 = ratio("f1", 2 * tp, 2 * tp + fp + fn)
    mcc_den = float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if mcc_den == 0:
        flags["mcc"] = True
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / np.sqrt(mcc_den)
    return BinaryReport(tp, fp, fn, tn, iou, prec, rec, f1, mcc, flags)


def pcc(scores, labels, mask=None) -> float:
    """Sample Pearson correlation; 0 when fewer than two valid positions or
    either series is constant."""
    s, y = _select(scores, labels, mask)
    if s.size < 2:
        return 0.0
    sc = s - s.mean()
    yc = y.astype(np.float64) - y.mean()
    denom = np.sqrt((sc * sc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return 0.0
    return float((sc * yc).sum() / denom)


def _pcc_degenerate(scores, labels, mask=None) -> bool:
    s, y = _select(scores, labels, mask)
    return s.size < 2 or np.all(s == s[0]) or np.all(y == y[0])


def roc_auc(scores, labels, mask=None) -> float:
    """Rank-based area under the ROC curve with midranks for ties.

    Equals P(score_pos > score_neg) + P(tie)/2; a single-class input
    reports 0.5.
    """
    s, y = _select(scores, labels, mask)
    pos = int((y == 1).sum())
    neg = int(y.size - pos)
    if pos == 0 or neg == 0:
        return 0.5
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j < s.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average of ranks i+1 .. j
        i = j
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def pr_auc(scores, labels, mask=None) -> float:
    """Average precision: sum of precision at each distinct score threshold
    weighted by the recall increment, sweeping thresholds in descending order.
    No positives reports 0."""
    s, y = _select(scores, labels, mask)
    pos = int((y == 1).sum())
    if pos == 0:
        return 0.0
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j].sum())
        seen += j - i
        recall = tp / pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap


def brier(scores, labels, mask=None) -> float:
    """Mean squared error between scores in [0,1] and the 0/1 labels."""
    s, y = _select(scores, labels, mask)
    if s.size == 0:
        return 0.0
    if (s < 0).any() or (s > 1).any():
        raise DataError("scores out of [0,1]", module="metrics")
    return float(np.mean((y.astype(np.float64) - s) ** 2))


def bce(scores, labels, mask=None) -> float:
    """Mean negative log-likelihood with scores clamped away from {0,1}."""
    s, y = _select(scores, labels, mask)
    if s.size == 0:
        return 0.0
    s = np.clip(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = y.astype(np.float64)
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


@dataclass(frozen=True)
class MetricsReport:
    """All per-role metrics: confusion-derived plus score-based."""

    binary: BinaryReport
    pcc: float
    roc_auc: float
    pr_auc: float
    brier: float
    bce: float
    flags: dict = field(default_factory=dict)


def full_report(scores, labels, threshold: float, mask=None) -> MetricsReport:
    s, y = _select(scores, labels, mask)
    calls = (s >= threshold).astype(np.int64)
    binary = confusion_metrics(calls, y)
    flags: dict = {}
    if _pcc_degenerate(s, y):
        flags["pcc"] = True
    pos = int((y == 1).sum())
    if pos == 0 or pos == y.size:
        flags["roc_auc"] = True
    if pos == 0:
        flags["pr_auc"] = True
    return MetricsReport(
        binary=binary,
        pcc=pcc(s, y),
        roc_auc=roc_auc(s, y),
        pr_auc=pr_auc(s, y),
        brier=brier(s, y),
        bce=bce(s, y),
        flags=flags,
    )


def report_rows(report: MetricsReport) -> list[tuple[str, float, str]]:
    """Flatten a report into (metric, value, flag) rows for CSV output."""
    b = report.binary
    rows = [
        ("tp", float(b.tp), ""),
        ("fp", float(b.fp), ""),
        ("fn", float(b.fn), ""),
        ("tn", float(b.tn), ""),
        ("n", float(b.n), ""),
    ]
    for name in ("iou", "prec", "rec", "f1", "mcc"):
        rows.append((name, getattr(b, name), "degenerate" if b.flags.get(name) else ""))
    for name in ("pcc", "roc_auc", "pr_auc", "brier", "bce"):
        rows.append((name, getattr(report, name), "degenerate" if report.flags.get(name) else ""))
    return rows


def threshold_sweep(scores, labels, grid, mask=None) -> list[tuple[float, BinaryReport]]:
    """Confusion metrics at each grid threshold; grid values are capped to [0,1]."""
    s, y = _select(scores, labels, mask)
    out = []
    for t in np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0):
        calls = (s >= t).astype(np.int64)
        out.append((float(t), confusion_metrics(calls, y)))
    return out


def write_metrics_csv(rows: list[tuple[str, str, float, str]], path: str | Path) -> None:
    """rows: (role, metric, value, flag)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["role", "metric", "value", "flag"])
        writer.writerows(rows)


def write_sweep_csv(rows: list[tuple[str, float, str, float]], path: str | Path) -> None:
    """rows: (role, threshold, metric, value)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["role", "threshold", "metric", "value"])
        writer.writerows(rows)
