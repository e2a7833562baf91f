"""Rank metrics for the anomaly guard, computed exactly.

Both AUROC and AP are accumulated as exact rationals and rounded once, so the
result does not depend on summation order.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(pos > neg) + 0.5 * P(tie)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(s, method="average")  # tied ranks are averaged, i.e. half-integers
    twice_u = int(round(2 * ranks[y].sum())) - n_pos * (n_pos + 1)
    return float(Fraction(twice_u, 2 * n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over positives of precision at their rank, divided by the positive count.

    Ranking is by descending score; ties keep input order.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ks = np.nonzero(hits)[0] + 1
    total = sum((Fraction(int(tp[k - 1]), int(k)) for k in ks), Fraction(0))
    return float(total / n_pos)


def keep_rate(decisions) -> float:
    """Fraction of a clean stream that passes the guard.

    ``decisions`` may be booleans (True = flagged) or "keep"/"flag" strings.
    """
    d = list(decisions)
    if not d:
        raise ValueError("empty decision stream")
    if isinstance(d[0], str):
        kept = sum(1 for x in d if x == "keep")
    else:
        kept = sum(1 for x in d if not x)
    return kept / len(d)


def precision_recall_f1(flags, labels) -> dict:
    """Flag quality with anomalies as the positive class."""
    f = np.asarray(flags, dtype=bool).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if f.shape != y.shape:
        raise ValueError("flags and labels differ in length")
    tp = int(np.sum(f & y))
    fp = int(np.sum(f & ~y))
    fn = int(np.sum(~f & y))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1, "tp": tp, "fp": fp, "fn": fn}
