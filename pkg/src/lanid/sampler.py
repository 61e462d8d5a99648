"""Candidate utterance pairs from local (KNN) and global density (DBSCAN) structure.

All neighbour searches are exact Euclidean scans; ties break on ascending id.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

NOISE = -1
_CHUNK = 2048


class SamplingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CandidatePair:
    anchor_id: int
    other_id: int
    source: str  # "knn" | "density"
    iteration: int = 0

    def __post_init__(self):
        if self.anchor_id == self.other_id:
            raise ValueError(f"self-pair on utterance {self.anchor_id}")
        if self.source not in ("knn", "density"):
            raise ValueError(f"unknown pair source {self.source!r}")

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.anchor_id, self.other_id), max(self.anchor_id, self.other_id))


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 50
    p: float = 0.1
    n_k: int = 2
    m: int = 5
    min_pts: int = 4
    eps: Optional[float] = None
    eps_quantile: float = 0.5
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        for name in ("K", "n_k", "m", "min_pts"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.n_k >= self.K:
            out.append("n_k must be < K")
        if not 0 < self.p <= 1:
            out.append("p must lie in (0, 1]")
        if self.eps is not None and self.eps <= 0:
            out.append("eps must be > 0")
        if not 0 < self.eps_quantile <= 1:
            out.append("eps_quantile must lie in (0, 1]")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class DbscanResult:
    assignment: np.ndarray  # cluster id per point, NOISE for noise
    core_flags: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.assignment.max() + 1) if len(self.assignment) else 0

    @property
    def core_ids(self) -> np.ndarray:
        return np.flatnonzero(self.core_flags)

    @property
    def non_core_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.core_flags)


def _rows(matrix) -> np.ndarray:
    return np.asarray(getattr(matrix, "rows", matrix), dtype=np.float64)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and rows of ``b``."""
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def _chunks(n: int, size: int = _CHUNK) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _nearest(dist_row: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary
    order = np.lexsort((ids, dist_row))
    return ids[order[:k]]


def knn_query(matrix, query_id: int, k: int) -> list[int]:
    x = _rows(matrix)
    n = len(x)
    if not 0 <= query_id < n:
        raise IndexError(f"query id {query_id} outside 0..{n - 1}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than n={n}")
    if k < 1:
        raise ValueError("k must be positive")
    dist = pairwise_distances(x[query_id : query_id + 1], x)[0]
    ids = np.arange(n)
    mask = ids != query_id
    return [int(i) for i in _nearest(dist[mask], ids[mask], k)]


def knn_table(matrix, query_ids: np.ndarray, k: int) -> np.ndarray:
    """Top-k neighbour ids (self excluded) for each query row."""
    x = _rows(matrix)
    n = len(x)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than n={n}")
    query_ids = np.asarray(query_ids, dtype=np.int64)
    out = np.empty((len(query_ids), k), dtype=np.int64)
    ids = np.arange(n)
    for sl in _chunks(len(query_ids)):
        dist = pairwise_distances(x[query_ids[sl]], x)
        for row, q in enumerate(query_ids[sl]):
            mask = ids != q
            out[sl.start + row] = _nearest(dist[row][mask], ids[mask], k)
    return out


def _dedup(pairs: Iterable[CandidatePair]) -> list[CandidatePair]:
    seen: set = set()
    out = []
    for pair in pairs:
        if pair.key not in seen:
            seen.add(pair.key)
            out.append(pair)
    return out


def _sample_size(p: float, n: int) -> int:
    # guard against float noise such as 0.1 * 30 = 3.0000000000000004
    return min(n, math.ceil(round(p * n, 9)))


def sample_knn_pairs(matrix, cfg: SamplerConfig, iteration: int = 0) -> list[CandidatePair]:
    """Pairs from anchors to uniformly drawn members of their top-K neighbourhood."""
    cfg.validate()
    x = _rows(matrix)
    n = len(x)
    if cfg.K >= n:
        raise ValueError(f"K={cfg.K} must be smaller than n={n}")
    n_anchors = _sample_size(cfg.p, n)
    if n_anchors < 1:
        raise ValueError("sample fraction selects no anchors")
    rng = np.random.default_rng([cfg.seed, iteration, 0])
    anchors = np.sort(rng.choice(n, size=n_anchors, replace=False))
    neighbours = knn_table(x, anchors, cfg.K)
    pairs = []
    for anchor, hood in zip(anchors, neighbours):
        for other in rng.choice(hood, size=cfg.n_k, replace=False):
            pairs.append(CandidatePair(int(anchor), int(other), "knn", iteration))
    return _dedup(pairs)


def _region_lists(x: np.ndarray, eps: float) -> list[np.ndarray]:
    n = len(x)
    hoods = []
    for sl in _chunks(n, 1024):
        dist = pairwise_distances(x[sl], x)
        for row in dist:
            hoods.append(np.flatnonzero(row <= eps))
    return hoods


def dbscan(matrix, eps: float, min_pts: int) -> DbscanResult:
    """DBSCAN with a closed eps-ball that counts the point itself.

    Clusters grow from core points in ascending id order; a border point joins
    the first cluster that reaches it.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    x = _rows(matrix)
    n = len(x)
    hoods = _region_lists(x, eps)
    core = np.array([len(h) >= min_pts for h in hoods], dtype=bool)
    assignment = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for start in range(n):
        if not core[start] or assignment[start] != NOISE:
            continue
        assignment[start] = cluster
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in hoods[i]:
                if assignment[j] == NOISE:
                    assignment[j] = cluster
                    if core[j]:
                        queue.append(j)
        cluster += 1
    return DbscanResult(assignment, core)


def auto_eps(matrix, min_pts: int, quantile: float = 0.5) -> float:
    """Quantile of the distance from each point to its min_pts-th nearest other point."""
    x = _rows(matrix)
    n = len(x)
    if n <= min_pts:
        raise ValueError(f"need more than min_pts={min_pts} points, got {n}")
    kdist = np.empty(n)
    for sl in _chunks(n):
        dist = pairwise_distances(x[sl], x)
        dist[np.arange(sl.stop - sl.start), np.arange(sl.start, sl.stop)] = np.inf
        kdist[sl] = np.partition(dist, min_pts - 1, axis=1)[:, min_pts - 1]
    eps = float(np.quantile(kdist, quantile))
    if eps <= 0.0:
        raise ValueError("zero radius: points are degenerate at this min_pts")
    return eps


def resolve_eps(matrix, cfg: SamplerConfig) -> float:
    return cfg.eps if cfg.eps is not None else auto_eps(matrix, cfg.min_pts, cfg.eps_quantile)


def sample_density_pairs(
    matrix, cfg: SamplerConfig, iteration: int = 0, result: Optional[DbscanResult] = None
) -> list[CandidatePair]:
    """Pairs from sampled non-core points to their m nearest core points."""
    cfg.validate()
    x = _rows(matrix)
    if result is None:
        result = dbscan(x, resolve_eps(x, cfg), cfg.min_pts)
    core_ids = result.core_ids
    non_core = result.non_core_ids
    if len(core_ids) == 0:
        warnings.warn("DBSCAN found no core points; no density pairs", SamplingWarning, stacklevel=2)
        return []
    if len(non_core) == 0:
        warnings.warn("DBSCAN found no non-core points; no density pairs", SamplingWarning, stacklevel=2)
        return []
    rng = np.random.default_rng([cfg.seed, iteration, 1])
    size = max(1, _sample_size(cfg.p, len(non_core)))
    chosen = np.sort(rng.choice(non_core, size=size, replace=False))
    m = min(cfg.m, len(core_ids))
    pairs = []
    for sl in _chunks(len(chosen)):
        dist = pairwise_distances(x[chosen[sl]], x[core_ids])
        for anchor, row in zip(chosen[sl], dist):
            for other in _nearest(row, core_ids, m):
                pairs.append(CandidatePair(int(anchor), int(other), "density", iteration))
    return _dedup(pairs)
