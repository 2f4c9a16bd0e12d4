"""Classification metrics: confusion-count F1, rank-based AUROC, span F1."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def confusion(gold, pred, num_labels: int) -> np.ndarray:
    """Counts matrix, rows = gold, columns = predicted."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    return np.bincount(gold * num_labels + pred, minlength=num_labels**2).reshape(num_labels, num_labels)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return np.array([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)])


def f1_scores(gold, pred, num_labels: int, exclude=()) -> tuple[float, float]:
    """(micro, macro) F1 over the classes not in ``exclude``.

    Micro pools TP/FP/FN over those classes; with nothing excluded in a
    single-label task it equals accuracy. Macro averages per-class F1 over
    classes that occur in gold or predictions.
    """
    cm = confusion(gold, pred, num_labels)
    keep = [c for c in range(num_labels) if c not in exclude]
    tp = np.diag(cm)[keep].sum()
    fp = cm.sum(axis=0)[keep].sum() - tp
    fn = cm.sum(axis=1)[keep].sum() - tp
    micro = _f1(tp, fp, fn)
    f1s = per_class_f1(cm)
    active = [c for c in keep if cm[c].sum() or cm[:, c].sum()]
    macro = float(np.mean(f1s[active])) if active else 0.0
    return float(micro), macro


def binary_auroc(gold, scores) -> float:
    """Mann-Whitney AUROC; tied scores count half."""
    gold = np.asarray(gold).astype(bool)
    n_pos = int(gold.sum())
    n_neg = gold.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[gold].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auroc(gold, probs, classes=None) -> tuple[float, list[int]]:
    """Unweighted mean of one-vs-rest AUROCs; returns (value, skipped classes).

    A class with no positive (or no negative) gold example has no defined
    AUROC; it is skipped and reported.
    """
    gold = np.asarray(gold)
    probs = np.asarray(probs)
    classes = range(probs.shape[1]) if classes is None else classes
    values, skipped = [], []
    for c in classes:
        a = binary_auroc(gold == c, probs[:, c])
        if np.isnan(a):
            skipped.append(int(c))
        else:
            values.append(a)
    return (float(np.mean(values)) if values else float("nan")), skipped


def span_f1(gold_spans, pred_spans) -> float:
    tp = len(gold_spans & pred_spans)
    return _f1(tp, len(pred_spans) - tp, len(gold_spans) - tp)
