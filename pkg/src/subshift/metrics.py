"""Evaluation: ranking AUC, per-subgroup accuracy, and correlation.

Subgroup accuracy is always reported over the two fixed binary partitions of
the evaluation set (by a and by s), no matter which grouping trained the
model. Mixing training groups into evaluation would make scores across
schemes incomparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateInput, MissingCell, SingleClass

__all__ = ["EvalReport", "auc", "accuracy", "evaluate", "pearson"]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes")
    ranks = stats.rankdata(scores)
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    return float(((scores >= threshold).astype(int) == labels).mean())


@dataclass(frozen=True)
class EvalReport:
    overall_auc: float
    overall_acc: float
    acc_by_a: dict
    acc_by_s: dict
    min_acc_A: float
    gap_A: float
    min_acc_S: float
    gap_S: float


def evaluate(model, dataset) -> EvalReport:
    """Score a trained model on a labeled split.

    Requires every (a, s) cell to be populated so both partition gaps are
    meaningful.
    """
    for a_val in (0, 1):
        for s_val in (0, 1):
            if not np.any((dataset.a == a_val) & (dataset.s == s_val)):
                raise MissingCell(f"no samples with a={a_val}, s={s_val}")
    scores = model.predict_scores(dataset.features)
    acc_by_a = {}
    acc_by_s = {}
    for v in (0, 1):
        mask_a = dataset.a == v
        mask_s = dataset.s == v
        acc_by_a[f"a{v}"] = accuracy(scores[mask_a], dataset.y[mask_a])
        acc_by_s[f"s{v}"] = accuracy(scores[mask_s], dataset.y[mask_s])
    a_vals = list(acc_by_a.values())
    s_vals = list(acc_by_s.values())
    return EvalReport(
        overall_auc=auc(scores, dataset.y),
        overall_acc=accuracy(scores, dataset.y),
        acc_by_a=acc_by_a,
        acc_by_s=acc_by_s,
        min_acc_A=min(a_vals),
        gap_A=max(a_vals) - min(a_vals),
        min_acc_S=min(s_vals),
        gap_S=max(s_vals) - min(s_vals),
    )


def pearson(x, y) -> tuple[float, float]:
    """Pearson r with a two-sided p-value (t distribution, n-2 dof)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise DegenerateInput("length mismatch")
    if len(x) < 3:
        raise DegenerateInput("need at least 3 points")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateInput("zero variance")
    r, p = stats.pearsonr(x, y)
    return float(r), float(p)
