"""Classification metrics: accuracy, macro-F1, one-vs-rest ROC-AUC, PR-AUC
(average precision) and cross-method average rank."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise ValueError("metrics need at least one sample")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(np.mean(preds == labels))


def macro_f1(preds, labels, C: int | None = None) -> float:
    """Unweighted mean of per-class F1; a class never predicted nor present scores 0."""
    preds, labels = _pair(preds, labels)
    C = C if C is not None else int(max(preds.max(), labels.max())) + 1
    scores = np.zeros(C)
    for c in range(C):
        tp = np.sum((preds == c) & (labels == c))
        denom = np.sum(preds == c) + np.sum(labels == c)
        scores[c] = 2.0 * tp / denom if denom else 0.0
    return float(scores.mean())


def _check_probs(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError(f"probs must be (N, C) with N={labels.size}, got {probs.shape}")
    if labels.size == 0:
        raise ValueError("metrics need at least one sample")
    return probs, labels


def binary_roc_auc(scores, positive) -> float:
    """Area under the ROC step curve; tied scores get midranks (half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, positive) -> float:
    """Step-wise PR area: ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive sample")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    # evaluate only at the last index of each tied score block
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _macro(metric, probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    C = probs.shape[1]
    values = []
    for c in range(C):
        pos = labels == c
        if not pos.any():
            warnings.warn(f"class {c} absent from labels; skipped in macro average", stacklevel=3)
            continue
        if pos.all():
            warnings.warn(f"class {c} has no negatives; skipped in macro average", stacklevel=3)
            continue
        values.append(metric(probs[:, c], pos))
    if not values:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(values))


def roc_auc_macro(probs, labels) -> float:
    """One-vs-rest ROC-AUC averaged over classes present in ``labels``."""
    return _macro(binary_roc_auc, probs, labels)


def pr_auc_macro(probs, labels) -> float:
    """One-vs-rest average precision averaged over classes present in ``labels``."""
    return _macro(average_precision, probs, labels)


def evaluate(probs, labels) -> dict[str, float]:
    """All four scalar metrics from class probabilities.

    AUCs are NaN when fewer than two classes occur in ``labels``.
    """
    probs, labels = _check_probs(probs, labels)
    preds = probs.argmax(axis=1)
    out = {"acc": accuracy(preds, labels), "f1_macro": macro_f1(preds, labels, probs.shape[1])}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            out["roc_auc"] = roc_auc_macro(probs, labels)
            out["pr_auc"] = pr_auc_macro(probs, labels)
        except ValueError:
            out["roc_auc"] = out["pr_auc"] = float("nan")
    return out


def average_rank(results) -> np.ndarray:
    """Mean per-dataset rank of each method (rows = methods, columns = datasets).

    Rank 1 is the highest score; ties share the mean rank.
    """
    table = np.asarray(results, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise ValueError("results must be a non-empty (methods, datasets) table")
    if np.isnan(table).any():
        bad = np.argwhere(np.isnan(table))[0]
        raise ValueError(f"missing score for method {bad[0]} on dataset {bad[1]}")
    ranks = rankdata(-table, axis=0)
    return ranks.mean(axis=1)
