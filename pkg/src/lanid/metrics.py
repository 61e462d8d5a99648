"""Clustering scores against ground-truth intents: NMI, ARI and Hungarian ACC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # rows: true classes, cols: predicted clusters
    row_sums: np.ndarray
    col_sums: np.ndarray
    total: int


def _as_labels(true_labels: Sequence, pred_labels: Sequence, min_len: int = 1):
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.ndim != 1 or p.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if len(t) != len(p):
        raise ValueError(f"length mismatch: {len(t)} true labels vs {len(p)} predicted")
    if len(t) < min_len:
        raise ValueError(f"need at least {min_len} labels, got {len(t)}")
    return t, p


def contingency(true_labels: Sequence, pred_labels: Sequence) -> ContingencyTable:
    t, p = _as_labels(true_labels, pred_labels)
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    counts = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    return ContingencyTable(counts, counts.sum(axis=1), counts.sum(axis=0), int(counts.sum()))


def _entropy(sizes: np.ndarray, total: int) -> float:
    probs = sizes[sizes > 0] / total
    return float(-(probs * np.log(probs)).sum())


def nmi(true_labels: Sequence, pred_labels: Sequence) -> float:
    """Mutual information normalised by the arithmetic mean of the two entropies.

    Natural-log entropies. Two single-cluster partitions score 1.0; if only one
    side is single-cluster the score is 0.0.
    """
    table = contingency(true_labels, pred_labels)
    h_true = _entropy(table.row_sums, table.total)
    h_pred = _entropy(table.col_sums, table.total)
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    if h_true == 0.0 or h_pred == 0.0:
        return 0.0
    nz = table.counts > 0
    n_uv = table.counts[nz].astype(float)
    outer = np.outer(table.row_sums, table.col_sums)[nz].astype(float)
    mi = float((n_uv / table.total * np.log(n_uv * table.total / outer)).sum())
    score = mi / (0.5 * (h_true + h_pred))
    return float(min(max(score, 0.0), 1.0))


def _comb2(x: np.ndarray) -> float:
    x = x.astype(float)
    return float((x * (x - 1) / 2).sum())


def ari(true_labels: Sequence, pred_labels: Sequence) -> float:
    table = contingency(*_as_labels(true_labels, pred_labels, min_len=2))
    index = _comb2(table.counts)
    sum_a = _comb2(table.row_sums)
    sum_b = _comb2(table.col_sums)
    n_pairs = table.total * (table.total - 1) / 2
    expected = sum_a * sum_b / n_pairs
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both all-singletons or both one cluster
        return 1.0
    return float((index - expected) / (max_index - expected))


def hungarian_acc(true_labels: Sequence, pred_labels: Sequence) -> float:
    """Fraction of points matched under the best one-to-one cluster-to-class map."""
    table = contingency(true_labels, pred_labels)
    size = max(table.counts.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: table.counts.shape[0], : table.counts.shape[1]] = table.counts
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum() / table.total)


def score_report(labels: Sequence, truth: Sequence) -> dict:
    """NMI/ARI/ACC of a predicted assignment, in report-JSON layout.

    ``labels`` may be a raw label sequence or anything exposing ``.labels``
    (e.g. a ``ClusterAssignment``).
    """
    pred = np.asarray(getattr(labels, "labels", labels))
    t, p = _as_labels(truth, pred)
    centroids = getattr(labels, "centroids", None)
    k = len(centroids) if centroids is not None else len(np.unique(p))
    return {
        "nmi": nmi(t, p),
        "ari": ari(t, p) if len(t) >= 2 else 1.0,
        "acc": hungarian_acc(t, p),
        "k": int(k),
        "n": int(len(t)),
    }
