import itertools

import numpy as np
import pytest
from sklearn import metrics as skm

from vlrefine.metrics import (all_metrics, auroc, average_precision, balanced_accuracy, binary_auroc,
                              binary_average_precision, f1_score)


def pair_enumeration_auroc(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def confusion(y_true, y_pred, k):
    m = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        m[t, p] += 1
    return m


def tied_instance(rng, n):
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 6, n) / 5.0  # few distinct values: many ties
    return y, s


class TestAUROC:
    def test_exact_against_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            y, s = tied_instance(rng, int(rng.integers(2, 51)))
            assert binary_auroc(y, s) == pair_enumeration_auroc(y, s)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            y, s = tied_instance(rng, 40)
            assert binary_auroc(y, s) == pytest.approx(skm.roc_auc_score(y, s), abs=1e-12)

    def test_perfect_and_reversed(self):
        y = np.array([0, 0, 1, 1])
        assert binary_auroc(y, [0.1, 0.2, 0.8, 0.9]) == 1.0
        assert binary_auroc(y, [0.9, 0.8, 0.2, 0.1]) == 0.0
        assert binary_auroc(y, [0.5] * 4) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            binary_auroc([1, 1], [0.2, 0.3])

    def test_multiclass_macro_ovr(self):
        rng = np.random.default_rng(2)
        y = np.arange(60) % 4
        p = rng.dirichlet(np.ones(4), size=60)
        assert auroc(y, p) == pytest.approx(100 * skm.roc_auc_score(y, p, multi_class="ovr", average="macro"))
        weighted = 100 * skm.roc_auc_score(y, p, multi_class="ovr", average="weighted")
        assert auroc(y, p, average="weighted") == pytest.approx(weighted)

    def test_absent_class_is_excluded_with_warning(self):
        y = np.array([0, 1, 0, 1])
        p = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1]])
        with pytest.warns(UserWarning, match="class 2"):
            assert auroc(y, p) == 100.0


class TestAP:
    def test_matches_sklearn_with_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            y, s = tied_instance(rng, int(rng.integers(2, 51)))
            assert binary_average_precision(y, s) == pytest.approx(skm.average_precision_score(y, s), abs=1e-12)

    def test_multiclass(self):
        rng = np.random.default_rng(4)
        y = np.arange(50) % 5
        p = rng.dirichlet(np.ones(5), size=50)
        onehot = np.eye(5)[y]
        expected = 100 * skm.average_precision_score(onehot, p, average="macro")
        assert average_precision(y, p) == pytest.approx(expected)

    def test_hand_example(self):
        # ranks: P N P N -> precision at hits 1 and 2/3
        assert binary_average_precision([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == pytest.approx((1 + 2 / 3) / 2)


class TestLabelMetrics:
    def test_against_confusion_matrix(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(k, 60))
            y = np.r_[np.arange(k), rng.integers(0, k, n - k)]
            pred = rng.integers(0, k, n)
            m = confusion(y, pred, k)
            recall = np.diag(m) / m.sum(1)
            assert balanced_accuracy(y, pred) == pytest.approx(100 * recall.mean(), abs=1e-12)
            tp, fp, fn = np.diag(m), m.sum(0) - np.diag(m), m.sum(1) - np.diag(m)
            denom = 2 * tp + fp + fn
            f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
            assert f1_score(y, pred) == pytest.approx(100 * f1.mean(), abs=1e-12)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(6)
        y = rng.integers(0, 4, 80)
        pred = rng.integers(0, 4, 80)
        assert balanced_accuracy(y, pred) == pytest.approx(100 * skm.balanced_accuracy_score(y, pred))
        assert f1_score(y, pred) == pytest.approx(100 * skm.f1_score(y, pred, average="macro"))
        assert f1_score(y, pred, "weighted") == pytest.approx(100 * skm.f1_score(y, pred, average="weighted"))

    def test_unknown_average(self):
        with pytest.raises(ValueError):
            f1_score([0, 1], [0, 1], average="micro-ish")

    def test_all_metrics_are_percentages(self):
        rng = np.random.default_rng(7)
        y = np.arange(40) % 4
        p = rng.dirichlet(np.ones(4), size=40)
        out = all_metrics(y, p)
        assert set(out) == {"bacc", "auroc", "ap", "f1"}
        assert all(0.0 <= v <= 100.0 for v in out.values())
        perfect = all_metrics(y, np.eye(4)[y])
        assert perfect == {"bacc": 100.0, "auroc": 100.0, "ap": 100.0, "f1": 100.0}
