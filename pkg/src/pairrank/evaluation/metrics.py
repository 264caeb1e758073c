"""Scalar metrics: Pearson correlation, rank AUC, Dice."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.stats import rankdata

DICE_THRESHOLDS = tuple(round(0.60 + 0.05 * i, 2) for i in range(7))


class UndefinedCorrelationError(ValueError):
    pass


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two points for a correlation")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def auc(scores, labels, exclude: Optional[np.ndarray] = None) -> float:
    """Probability that a positive outranks a negative, ties counted one half.

    Rows flagged in ``exclude`` (e.g. pairs with equal targets) are dropped first.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    lab = np.asarray(labels).ravel()
    if s.shape != lab.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {lab.size} labels")
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool).ravel()
        s, lab = s[keep], lab[keep]
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos = lab == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both label classes")
    # mid-ranks are integers or halves, so the sum below is exact
    ranks = rankdata(s, method="average")
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def binarize(amap: np.ndarray, threshold: float) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(amap) >= threshold


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
