"""k-means (k-means++ seeding, Lloyd iterations, best of R restarts)."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lanid.sampler import pairwise_distances

log = logging.getLogger(__name__)

# slack for rounding in the monotonicity check
_MONO_TOL = 1e-9


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int = 0
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utterance_id", "cluster_id"])
            for i, c in enumerate(self.labels):
                w.writerow([i, int(c)])

    def summary(self) -> dict:
        return {"k": self.k, "inertia": float(self.inertia), "iterations": int(self.iterations)}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return pairwise_distances(x, c) ** 2


def _assign(x: np.ndarray, centroids: np.ndarray):
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)  # argmin returns the lowest index on ties
    return labels, d2


def _inertia(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a centroid already
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> ClusterAssignment:
    centroids = kmeans_plusplus(x, k, rng)
    labels, _ = _assign(x, centroids)
    trace = [_inertia(x, centroids, labels)]
    it = 0
    for it in range(1, max_iter + 1):
        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # reseed each empty cluster at the point farthest from its centroid
            own = ((x - new[labels]) ** 2).sum(1)
            for j in empty:
                far = int(np.argmax(own))
                new[j] = x[far]
                own[far] = -1.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        labels, _ = _assign(x, centroids)
        inertia = _inertia(x, centroids, labels)
        if inertia > trace[-1] + _MONO_TOL * max(1.0, trace[-1]):
            raise AssertionError(f"Lloyd inertia rose from {trace[-1]} to {inertia} at iteration {it}")
        trace.append(inertia)
        if shift < tol:
            break
    return ClusterAssignment(labels, centroids, trace[-1], it, trace)


def kmeans(matrix, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6, n_init: int = 10) -> ClusterAssignment:
    """Best-of-``n_init`` k-means; restarts are ranked by (inertia, restart index)."""
    x = np.asarray(getattr(matrix, "rows", matrix), dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, n={n}]")
    seeds = np.random.SeedSequence(seed).spawn(n_init)
    best = None
    for ss in seeds:
        result = _lloyd(x, k, np.random.default_rng(ss), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    log.debug("kmeans k=%d inertia=%.6g after %d iterations", k, best.inertia, best.iterations)
    return best


def predict(adapter, base_test, k: int, seed: int = 0, **kwargs) -> ClusterAssignment:
    """Cluster test embeddings after passing them through the adapter."""
    x = np.asarray(getattr(base_test, "rows", base_test), dtype=np.float64)
    if adapter is not None:
        if x.shape[1] != adapter.dim:
            raise ValueError(f"adapter dimension {adapter.dim} does not match embeddings {x.shape[1]}")
        x = adapter(x)
    return kmeans(x, k, seed, **kwargs)
