import math

import numpy as np
import pytest

from abconformer.core import DataError
from abconformer.metrics import (
    bce,
    brier,
    confusion_metrics,
    full_report,
    pcc,
    pr_auc,
    report_rows,
    roc_auc,
    threshold_sweep,
)


def loop_confusion(calls, labels):
    tp = fp = fn = tn = 0
    for c, y in zip(calls, labels):
        if c == 1 and y == 1:
            tp += 1
        elif c == 1 and y == 0:
            fp += 1
        elif c == 0 and y == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def pairwise_roc_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def enumerate_pr_auc(scores, labels):
    """Average precision by explicit sweep over all distinct thresholds."""
    pos = sum(labels)
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_rec = 0.0
    for t in thresholds:
        calls = [1 if s >= t else 0 for s in scores]
        tp, fp, fn, _ = loop_confusion(calls, labels)
        prec = tp / (tp + fp)
        rec = tp / pos
        ap += (rec - prev_rec) * prec
        prev_rec = rec
    return ap


class TestConfusion:
    def test_basic_counts(self):
        report = confusion_metrics([1, 1, 0], [1, 0, 0])
        assert (report.tp, report.fp, report.fn, report.tn) == (1, 1, 0, 1)
        assert report.iou == 0.5
        assert report.prec == 0.5
        assert report.rec == 1.0
        assert report.f1 == pytest.approx(2 / 3)

    def test_perfect_prediction(self):
        labels = [0, 1, 1, 0, 1]
        report = confusion_metrics(labels, labels)
        assert report.iou == report.prec == report.rec == report.f1 == 1.0
        assert report.mcc == pytest.approx(1.0)

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(0)
        calls = rng.integers(0, 2, size=50)
        labels = rng.integers(0, 2, size=50)
        report = confusion_metrics(calls, labels)
        assert report.n == 50

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            calls = rng.integers(0, 2, size=50)
            labels = rng.integers(0, 2, size=50)
            report = confusion_metrics(calls, labels)
            tp, fp, fn, tn = loop_confusion(calls.tolist(), labels.tolist())
            assert (report.tp, report.fp, report.fn, report.tn) == (tp, fp, fn, tn)

    def test_degenerate_flags(self):
        report = confusion_metrics([0, 0], [0, 0])
        assert report.flags.get("iou") and report.flags.get("prec") and report.flags.get("rec")
        assert report.iou == 0.0 and report.mcc == 0.0

    def test_mask_applied(self):
        report = confusion_metrics([1, 1, 1], [1, 0, 0], mask=[True, True, False])
        assert (report.tp, report.fp) == (1, 1)

    def test_f1_harmonic_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            calls = rng.integers(0, 2, size=25)
            labels = rng.integers(0, 2, size=25)
            r = confusion_metrics(calls, labels)
            if r.prec + r.rec > 0 and not r.flags.get("prec") and not r.flags.get("rec"):
                assert r.f1 == pytest.approx(2 * r.prec * r.rec / (r.prec + r.rec), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            confusion_metrics([1, 0], [1])


class TestPcc:
    def test_identical_series(self):
        assert pcc([0, 1, 0, 1], [0, 1, 0, 1]) == pytest.approx(1.0)

    def test_inverted_series(self):
        assert pcc([1, 0, 1, 0], [0, 1, 0, 1]) == pytest.approx(-1.0)

    def test_constant_series_degenerate(self):
        assert pcc([0.5, 0.5, 0.5], [0, 1, 0]) == 0.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = rng.random(20)
            y = rng.integers(0, 2, size=20)
            if y.min() == y.max():
                continue
            sm, ym = s.mean(), y.mean()
            cov = sum((a - sm) * (b - ym) for a, b in zip(s, y)) / 20
            sd_s = math.sqrt(sum((a - sm) ** 2 for a in s) / 20)
            sd_y = math.sqrt(sum((b - ym) ** 2 for b in y) / 20)
            assert pcc(s, y) == pytest.approx(cov / (sd_s * sd_y), abs=1e-12)


class TestRocAuc:
    def test_perfect_ranking(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_single_class_reports_half(self):
        assert roc_auc([0.2, 0.9], [1, 1]) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            s = np.round(rng.random(30), 2)  # rounding forces ties
            y = rng.integers(0, 2, size=30)
            if y.min() == y.max():
                continue
            assert abs(roc_auc(s, y) - pairwise_roc_auc(s.tolist(), y.tolist())) <= 1e-12

    def test_equals_trapezoidal_integral(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s = np.round(rng.random(40), 2)
            y = rng.integers(0, 2, size=40)
            if y.min() == y.max():
                continue
            pos = y.sum()
            neg = len(y) - pos
            thresholds = np.concatenate([[np.inf], np.sort(np.unique(s))[::-1]])
            tpr = [((s >= t) & (y == 1)).sum() / pos for t in thresholds]
            fpr = [((s >= t) & (y == 0)).sum() / neg for t in thresholds]
            trapezoid = np.trapezoid(tpr, fpr)
            assert abs(roc_auc(s, y) - trapezoid) <= 1e-9


class TestPrAuc:
    def test_perfect_ranking(self):
        assert pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_ranked_last(self):
        for n in (3, 5, 8):
            scores = [float(n - i) for i in range(n)]
            labels = [0] * (n - 1) + [1]
            assert pr_auc(scores, labels) == pytest.approx(1.0 / n, abs=1e-15)

    def test_matches_threshold_enumeration(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            s = np.round(rng.random(25), 2)
            y = rng.integers(0, 2, size=25)
            if y.sum() == 0:
                continue
            assert abs(pr_auc(s, y) - enumerate_pr_auc(s.tolist(), y.tolist())) <= 1e-12

    def test_no_positives_reports_zero(self):
        assert pr_auc([0.1, 0.9], [0, 0]) == 0.0


class TestBrier:
    def test_perfect_confident(self):
        assert brier([1.0, 0.0, 1.0], [1, 0, 1]) == 0.0

    def test_all_half(self):
        assert brier([0.5] * 4, [1, 0, 1, 0]) == 0.25

    def test_hand_case(self):
        value = brier([0.9, 0.2, 0.6, 0.0], [1, 0, 1, 0])
        assert value == pytest.approx(0.0525, abs=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError, match="0,1"):
            brier([1.2], [1])


class TestBce:
    def test_all_half_is_ln2(self):
        assert bce([0.5] * 6, [1, 0, 1, 0, 1, 0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_bounded_by_clamp(self):
        value = bce([1.0, 0.0], [1, 0])
        assert 0 <= value < 1e-10

    def test_hand_case(self):
        value = bce([0.8, 0.4], [1, 0])
        expected = -(math.log(0.8) + math.log(0.6)) / 2
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.36698, abs=1e-5)


class TestThresholdSweep:
    def test_zero_threshold_full_recall(self):
        scores = [0.0, 0.3, 0.8]
        labels = [0, 1, 1]
        sweep = threshold_sweep(scores, labels, [0.0])
        assert sweep[0][1].rec == 1.0

    def test_grid_capped_at_one(self):
        sweep = threshold_sweep([0.2, 0.9], [0, 1], [1.5])
        t, report = sweep[0]
        assert t == 1.0
        assert report.tp + report.fp == 0
        assert report.flags.get("prec")

    def test_recall_non_increasing(self):
        rng = np.random.default_rng(7)
        scores = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        grid = np.linspace(0, 1, 21)
        recalls = [r.rec for _, r in threshold_sweep(scores, labels, grid)]
        assert all(a >= b - 1e-12 for a, b in zip(recalls, recalls[1:]))


class TestPoolingIdentity:
    def test_concatenation_equals_pooled(self):
        rng = np.random.default_rng(8)
        chunks_s = [rng.random(rng.integers(3, 10)) for _ in range(4)]
        chunks_y = [rng.integers(0, 2, size=len(s)) for s in chunks_s]
        pooled_s = np.concatenate(chunks_s)
        pooled_y = np.concatenate(chunks_y)
        a = full_report(pooled_s, pooled_y, threshold=0.5)
        b = full_report(np.concatenate(chunks_s), np.concatenate(chunks_y), threshold=0.5)
        assert a == b

    def test_report_rows_complete(self):
        rng = np.random.default_rng(9)
        report = full_report(rng.random(20), rng.integers(0, 2, size=20), threshold=0.5)
        names = [name for name, _, _ in report_rows(report)]
        assert names == [
            "tp", "fp", "fn", "tn", "n",
            "iou", "prec", "rec", "f1", "mcc",
            "pcc", "roc_auc", "pr_auc", "brier", "bce",
        ]
