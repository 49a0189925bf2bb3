"""Spatial and slope clustering of patient progression patterns.

Patients are clustered by the spatial shape of their per-point progression
slopes (unit-normalized, so severity does not dominate), and within each
retained spatial cluster the pooled per-point slopes are quantized into at
most C representative progression rates.

The k-means here is deliberately self-contained: k-means++ seeding,
deterministic restarts derived from (seed, restart index), lowest-index
tie-breaking in assignments, and empty clusters reseeded to the point
farthest from their current center.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import PatientSeries

log = logging.getLogger(__name__)

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100
KMEANS_REL_TOL = 1e-6


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray  # (k, dim)
    labels: np.ndarray  # (n_points,)
    objective: float  # sum of squared distances to assigned centers
    objective_history: tuple[float, ...]  # per accepted iteration, best restart


@dataclass(frozen=True)
class SpatialClustering:
    """Partition of patients into K spatial progression-pattern clusters."""

    assignments: dict[str, int]
    centers: np.ndarray  # (K, D) normalized slope patterns
    retained: frozenset[int]
    min_size: int

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def members(self, cluster: int) -> list[str]:
        return [pid for pid, c in self.assignments.items() if c == cluster]

    def cluster_sizes(self) -> dict[int, int]:
        sizes = {k: 0 for k in range(self.k)}
        for c in self.assignments.values():
            sizes[c] += 1
        return sizes


@dataclass(frozen=True)
class SlopeSet:
    """At most C representative progression rates with per-point assignment.

    ``point_assignment`` maps patient_id -> (D,) array of indices into
    ``rates``.
    """

    rates: np.ndarray
    point_assignment: dict[str, np.ndarray]


def patient_feature(series: PatientSeries) -> np.ndarray:
    """Per-point OLS slope of TD against date: the progression pattern."""
    d = series.dates
    dc = d - d.mean()
    ss = float(dc @ dc)
    if ss <= 0.0:
        raise ValueError(f"series {series.patient_id!r}: zero date variance")
    yc = series.fields - series.fields.mean(axis=0)
    return (dc @ yc) / ss


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n_points, k) squared Euclidean distances, clipped at zero."""
    sq = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Squared-distance-weighted seeding; uniform fallback on zero spread."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = points[idx]
        np.minimum(closest, np.sum((points - centers[j]) ** 2, axis=1), out=closest)
    return centers


def _lloyd(
    points: np.ndarray, centers: np.ndarray, max_iter: int, rel_tol: float
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    k = centers.shape[0]
    centers = centers.copy()
    history: list[float] = []
    prev_obj = np.inf
    converged = False
    for _ in range(max_iter):
        sq = _squared_distances(points, centers)
        labels = np.argmin(sq, axis=1)  # ties resolve to the lowest index
        obj = float(sq[np.arange(points.shape[0]), labels].sum())
        history.append(obj)
        if prev_obj < np.inf and prev_obj - obj <= rel_tol * max(prev_obj, 1e-300):
            converged = True
            break
        prev_obj = obj
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                # Reseed an empty cluster to the point farthest from its
                # current center; ties resolve to the lowest point index.
                far = np.argmax(np.sum((points - centers[j]) ** 2, axis=1))
                centers[j] = points[far]
    if not converged:
        # Re-assign so labels and objective match the final centers.
        sq = _squared_distances(points, centers)
        labels = np.argmin(sq, axis=1)
        obj = float(sq[np.arange(points.shape[0]), labels].sum())
        history.append(obj)
    return centers, labels, history[-1], history


def kmeans(
    points,
    k: int,
    *,
    seed: int,
    restarts: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    rel_tol: float = KMEANS_REL_TOL,
) -> KMeansResult:
    """Best-of-``restarts`` k-means, deterministic for a fixed seed."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("kmeans expects a 2-D point array")
    if k <= 0:
        raise ValueError(f"cluster count must be positive, got {k}")
    if pts.shape[0] < k:
        raise ValueError(f"cannot split {pts.shape[0]} points into {k} clusters")

    best: tuple[float, np.ndarray, np.ndarray, list[float]] | None = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, r]))
        init = _kmeanspp_init(pts, k, rng)
        centers, labels, obj, history = _lloyd(pts, init, max_iter, rel_tol)
        if best is None or obj < best[0]:
            best = (obj, centers, labels, history)
    obj, centers, labels, history = best
    return KMeansResult(centers, labels, obj, tuple(history))


def _lloyd_1d(
    xs: np.ndarray,  # sorted values
    prefix: np.ndarray,  # prefix sums of xs, length n+1
    prefix_sq: np.ndarray,  # prefix sums of xs^2
    centers: np.ndarray,
    max_iter: int,
    rel_tol: float,
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Lloyd iterations specialized to scalars.

    Clusters of sorted scalars are contiguous runs, so assignment is a
    searchsorted against midpoints and means come from prefix sums.
    Centers are kept in ascending order; points equidistant to two centers
    join the smaller (lower-index) one.  Returns (centers, split points,
    objective, history).
    """
    n = xs.shape[0]
    k = centers.shape[0]
    centers = np.sort(centers)
    history: list[float] = []
    prev_obj = np.inf
    splits = np.empty(k + 1, dtype=np.intp)
    converged = False
    for _ in range(max_iter):
        mids = 0.5 * (centers[:-1] + centers[1:])
        splits[0] = 0
        splits[-1] = n
        splits[1:-1] = np.searchsorted(xs, mids, side="right")
        counts = np.diff(splits)
        sums = prefix[splits[1:]] - prefix[splits[:-1]]
        sq = prefix_sq[splits[1:]] - prefix_sq[splits[:-1]]
        obj = float(np.sum(sq - 2.0 * centers * sums + counts * centers**2))
        history.append(obj)
        if prev_obj < np.inf and prev_obj - obj <= rel_tol * max(prev_obj, 1e-300):
            converged = True
            break
        prev_obj = obj
        empty = counts == 0
        centers = np.where(empty, centers, sums / np.maximum(counts, 1))
        if empty.any():
            # Reseed each empty center to the farthest point (an endpoint).
            for j in np.flatnonzero(empty):
                centers[j] = xs[0] if centers[j] - xs[0] >= xs[-1] - centers[j] else xs[-1]
        centers = np.sort(centers)
    if not converged:
        mids = 0.5 * (centers[:-1] + centers[1:])
        splits[1:-1] = np.searchsorted(xs, mids, side="right")
        counts = np.diff(splits)
        sums = prefix[splits[1:]] - prefix[splits[:-1]]
        sq = prefix_sq[splits[1:]] - prefix_sq[splits[:-1]]
        obj = float(np.sum(sq - 2.0 * centers * sums + counts * centers**2))
        history.append(obj)
    return centers, splits.copy(), history[-1], history


def kmeans_1d(
    values,
    k: int,
    *,
    seed: int,
    restarts: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    rel_tol: float = KMEANS_REL_TOL,
) -> KMeansResult:
    """Scalar k-means with ascending centers and canonical labels.

    Same protocol as :func:`kmeans` (k-means++ restarts, best objective,
    empty-cluster reseeding) on sorted values with prefix-sum updates.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if k <= 0:
        raise ValueError(f"cluster count must be positive, got {k}")
    if vals.shape[0] < k:
        raise ValueError(f"cannot split {vals.shape[0]} points into {k} clusters")
    order = np.argsort(vals, kind="stable")
    xs = vals[order]
    prefix = np.concatenate([[0.0], np.cumsum(xs)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(xs**2)])

    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, r]))
        init = _kmeanspp_init(xs[:, None], k, rng)[:, 0]
        centers, splits, obj, history = _lloyd_1d(
            xs, prefix, prefix_sq, init, max_iter, rel_tol
        )
        if best is None or obj < best[0]:
            best = (obj, centers, splits, history)
    obj, centers, splits, history = best
    labels_sorted = np.repeat(np.arange(k, dtype=np.intp), np.diff(splits))
    labels = np.empty(vals.shape[0], dtype=np.intp)
    labels[order] = labels_sorted
    return KMeansResult(centers[:, None], labels, obj, tuple(history))


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Scale rows to unit Euclidean norm; zero rows are left untouched."""
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return vectors / safe


def cluster_spatial(
    cohort: list[PatientSeries], k: int, min_size: int, seed: int
) -> SpatialClustering:
    """K-means over unit-normalized progression patterns.

    Clusters with fewer than ``min_size`` members are kept in the partition
    but excluded from ``retained``.
    """
    if k <= 0:
        raise ValueError(f"spatial cluster count must be positive, got {k}")
    if len(cohort) < k:
        raise ValueError(f"cohort of {len(cohort)} patients cannot fill {k} clusters")
    features = normalize_rows(np.stack([patient_feature(s) for s in cohort]))
    result = kmeans(features, k, seed=seed)
    assignments = {s.patient_id: int(c) for s, c in zip(cohort, result.labels)}
    counts = np.bincount(result.labels, minlength=k)
    retained = frozenset(int(j) for j in range(k) if counts[j] >= min_size)
    return SpatialClustering(assignments, result.centers, retained, min_size)


def cluster_slopes(cluster_members: list[PatientSeries], c: int, seed: int) -> SlopeSet:
    """Quantize the pooled per-point slopes of a cluster into <= C rates.

    When the pooled slopes take at most C distinct values the rates are
    exactly those values (zero quantization error); otherwise a 1-D
    k-means picks the representatives.  Rates are reported in ascending
    order.
    """
    if c <= 0:
        raise ValueError(f"slope cluster count must be positive, got {c}")
    if not cluster_members:
        raise ValueError("cluster_slopes: empty member list")
    slopes = np.stack([patient_feature(s) for s in cluster_members])  # (m, D)
    pooled = slopes.ravel()
    uniq = np.unique(pooled)
    if uniq.shape[0] <= c:
        rates = uniq
        idx = np.searchsorted(rates, pooled)
    else:
        result = kmeans_1d(pooled, c, seed=seed)
        rates = result.centers[:, 0]  # ascending by construction
        idx = result.labels
    point_assignment = {
        s.patient_id: idx[i * slopes.shape[1] : (i + 1) * slopes.shape[1]].copy()
        for i, s in enumerate(cluster_members)
    }
    return SlopeSet(rates, point_assignment)
