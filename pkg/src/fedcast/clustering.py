"""Client grouping by dynamic time warping distance and k-medoids.

Clients with similar demand shapes are grouped before federated training
so each group trains one shared model.  Series are z-normalized per
client first, so the grouping keys on shape rather than volume.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .tensor import ShapeError


@njit(cache=True)
def _dtw_kernel(a: np.ndarray, b: np.ndarray) -> float:
    # Classic O(n*m) dynamic program, |a_i - b_j| local cost, allowed
    # steps match/insert/delete, both path ends anchored.
    n, m = a.shape[0], b.shape[0]
    prev = np.empty(m + 1)
    curr = np.empty(m + 1)
    for j in range(m + 1):
        prev[j] = np.inf
    prev[0] = 0.0
    for i in range(n):
        curr[0] = np.inf
        for j in range(m):
            cost = abs(a[i] - b[j])
            best = prev[j]  # diagonal
            if prev[j + 1] < best:
                best = prev[j + 1]  # insert
            if curr[j] < best:
                best = curr[j]  # delete
            curr[j + 1] = cost + best
        prev, curr = curr, prev
    return prev[m]


def dtw_distance(a, b) -> float:
    """Dynamic time warping distance between two 1-D series."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError("dtw_distance expects 1-D series")
    if a.size == 0 or b.size == 0:
        raise ShapeError("dtw_distance needs non-empty series")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("dtw_distance needs finite series")
    return float(_dtw_kernel(a, b))


def znormalize(series) -> np.ndarray:
    """Zero-mean unit-variance copy of a series (guarded for constants)."""
    series = np.asarray(series, dtype=np.float64)
    std = series.std()
    if std < 1e-12:
        return np.zeros_like(series)
    return (series - series.mean()) / std


def distance_matrix(series_list, znorm: bool = True) -> np.ndarray:
    """Pairwise DTW distances; symmetric with an exactly zero diagonal."""
    prepared = [znormalize(s) if znorm else np.asarray(s, dtype=np.float64) for s in series_list]
    k = len(prepared)
    dist = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d = dtw_distance(prepared[i], prepared[j])
            dist[i, j] = d
            dist[j, i] = d
    return dist


@dataclass
class Clustering:
    """Result of one k-medoids run over a precomputed distance matrix."""

    labels: np.ndarray  # cluster index per point
    medoids: list[int]  # point index of each cluster's medoid
    cost: float  # sum of distances to assigned medoids
    n_iter: int
    cost_history: list[float]

    @property
    def assignment(self) -> dict[int, int]:
        return {i: int(c) for i, c in enumerate(self.labels)}


def _kpp_init(dist: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    # Distance-proportional seeding: the next medoid is sampled with
    # probability proportional to its distance from the chosen set.
    n = dist.shape[0]
    medoids = [int(rng.integers(n))]
    while len(medoids) < k:
        dmin = dist[:, medoids].min(axis=1)
        total = dmin.sum()
        if total <= 0.0:
            remaining = [i for i in range(n) if i not in medoids]
            medoids.append(int(rng.choice(remaining)))
        else:
            medoids.append(int(rng.choice(n, p=dmin / total)))
    return medoids


def _assign(dist: np.ndarray, medoids: list[int]) -> np.ndarray:
    # Nearest medoid, ties to the earliest medoid in list order; each
    # medoid always lands in its own cluster.
    labels = np.argmin(dist[:, medoids], axis=1)
    for ci, m in enumerate(medoids):
        labels[m] = ci
    return labels


def kmedoids(
    dist: np.ndarray,
    k: int,
    seed: int | np.random.Generator = 0,
    max_iter: int = 100,
) -> Clustering:
    """Alternating k-medoids over a precomputed distance matrix.

    Assignment and medoid-recomputation steps both never increase the
    total cost, so the loop terminates at a (local) optimum or at
    `max_iter`.  Deterministic for a fixed seed.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ShapeError("dist must be a square matrix")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    medoids = _kpp_init(dist, k, rng)
    labels = _assign(dist, medoids)
    history = [float(dist[np.arange(n), [medoids[c] for c in labels]].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_medoids: list[int] = []
        for ci in range(k):
            members = np.flatnonzero(labels == ci)
            within = dist[np.ix_(members, members)].sum(axis=1)
            new_medoids.append(int(members[np.argmin(within)]))
        new_labels = _assign(dist, new_medoids)
        history.append(float(dist[np.arange(n), [new_medoids[c] for c in new_labels]].sum()))
        if new_medoids == medoids and np.array_equal(new_labels, labels):
            break
        medoids, labels = new_medoids, new_labels
    return Clustering(
        labels=labels,
        medoids=medoids,
        cost=history[-1],
        n_iter=n_iter,
        cost_history=history,
    )


def cluster_series(
    series_list,
    k: int,
    seed: int | np.random.Generator = 0,
    znorm: bool = True,
) -> Clustering:
    """Convenience wrapper: z-normalize, DTW matrix, k-medoids."""
    return kmedoids(distance_matrix(series_list, znorm=znorm), k, seed)
