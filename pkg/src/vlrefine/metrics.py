"""Classification metrics in percent: BAcc, macro one-vs-rest AUROC / AP, macro F1."""

from __future__ import annotations

import warnings

import numpy as np


def _as_labels(y) -> np.ndarray:
    return np.asarray(y).astype(np.int64).ravel()


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``, x100."""
    y_true, y_pred = _as_labels(y_true), _as_labels(y_pred)
    classes = np.unique(y_true)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in classes]
    return 100.0 * float(np.mean(recalls))


def f1_score(y_true, y_pred, average: str = "macro", labels=None) -> float:
    """Per-class F1 averaged over ``labels`` (default: every class seen in truth or predictions), x100.

    A class with no true and no predicted members scores 0.
    """
    y_true, y_pred = _as_labels(y_true), _as_labels(y_pred)
    classes = np.union1d(y_true, y_pred) if labels is None else np.asarray(labels)
    scores, support = [], []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
        support.append(tp + fn)
    return 100.0 * _average(scores, support, average)


def _average(values, support, average: str) -> float:
    if average == "macro":
        return float(np.mean(values))
    if average == "weighted":
        return float(np.average(values, weights=support))
    raise ValueError(f"unknown averaging mode {average!r}")


def binary_auroc(y_true, scores) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count one half.

    Uses mid-ranks; twice every quantity is an integer so the result equals
    explicit pair enumeration exactly.
    """
    y = np.asarray(y_true).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative examples")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # 2 * mid-rank (1-based) for each tie group: first + last position
    twice_rank = np.empty(len(s), dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        twice_rank[order[a:b]] = (a + 1) + b
    twice_u = int(twice_rank[y].sum()) - n_pos * (n_pos + 1)
    return (twice_u / 2.0) / (n_pos * n_neg)


def binary_average_precision(y_true, scores) -> float:
    """Step-wise area under precision-recall: sum over thresholds of (R_k - R_{k-1}) * P_k."""
    y = np.asarray(y_true).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AP needs at least one positive example")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each tied score block is a threshold
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _one_vs_rest(fn, y_true, scores, average: str) -> float:
    y_true = _as_labels(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        return 100.0 * fn(y_true == 1, scores)
    values, support = [], []
    for c in range(scores.shape[1]):
        pos = y_true == c
        if not pos.any():
            warnings.warn(f"class {c} absent from y_true; excluded from the average", stacklevel=3)
            continue
        if pos.all():
            warnings.warn(f"class {c} is the only class in y_true; excluded from the average", stacklevel=3)
            continue
        values.append(fn(pos, scores[:, c]))
        support.append(int(pos.sum()))
    if not values:
        raise ValueError("no class has both positive and negative examples")
    return 100.0 * _average(values, support, average)


def auroc(y_true, scores, average: str = "macro") -> float:
    """Binary AUROC for 1-D ``scores``, otherwise one-vs-rest over score columns."""
    return _one_vs_rest(binary_auroc, y_true, scores, average)


def average_precision(y_true, scores, average: str = "macro") -> float:
    return _one_vs_rest(binary_average_precision, y_true, scores, average)


def all_metrics(y_true, proba, average: str = "macro") -> dict[str, float]:
    pred = np.argmax(proba, axis=1)
    return {
        "bacc": balanced_accuracy(y_true, pred),
        "auroc": auroc(y_true, proba, average),
        "ap": average_precision(y_true, proba, average),
        "f1": f1_score(y_true, pred, average),
    }
