"""Seeded Lloyd K-means with k-means++ initialisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .parallel import map_chunks

# float64 elements per distance block (rows * k * dim)
_BLOCK_ELEMS = 1 << 20


@dataclass(frozen=True)
class Centroids:
    values: np.ndarray  # (k, dim) float64
    inertia: float | None  # None when loaded from disk

    @property
    def k(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


def _check_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"points must be a non-empty 2-D array, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("points contain non-finite values")
    return x


def nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest centroid for each point.

    Distances are evaluated as ``sum((x - c) ** 2)``, not via the dot-product
    expansion, so equal distances compare equal and ``argmin`` keeps the
    lowest index on ties.
    """
    n, d = points.shape
    k = centroids.shape[0]
    rows = max(1, _BLOCK_ELEMS // max(1, k * d))

    def block(s, e):
        diff = points[s:e, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        idx = np.argmin(d2, axis=1)
        return idx, d2[np.arange(e - s), idx]

    parts = map_chunks(block, n, rows)
    return (
        np.concatenate([p[0] for p in parts]).astype(np.int64),
        np.concatenate([p[1] for p in parts]),
    )


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # fewer distinct points than k: duplicate an existing point
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _update(x, labels, d2, k) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    out = np.zeros_like(sums)
    full = counts > 0
    out[full] = sums[full] / counts[full, None]
    empty = np.flatnonzero(~full)
    if empty.size:
        # farthest points (from their current centroid) seed empty clusters
        order = np.argsort(-d2, kind="stable")
        for j, p in zip(empty, order):
            out[j] = x[p]
    return out


def kmeans_fit(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> Centroids:
    """Fit ``k`` centroids with Lloyd iterations.

    Stops when the relative inertia improvement drops below ``tol``, inertia
    reaches zero, or after ``max_iters`` update steps. The returned inertia is
    for the assignment of the points to the returned centroids.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol < 0:
        raise ValueError("tol must be non-negative")
    x = _check_points(points)
    rng = np.random.default_rng(seed)

    centers = _kmeans_pp(x, k, rng)
    labels, d2 = nearest(x, centers)
    inertia = float(d2.sum())
    for _ in range(max_iters):
        if inertia == 0.0:
            break
        centers = _update(x, labels, d2, k)
        labels, d2 = nearest(x, centers)
        new_inertia = float(d2.sum())
        # slack covers rounding in the mean computation only
        assert new_inertia <= inertia * (1 + 1e-9), "Lloyd step increased inertia"
        gain = inertia - new_inertia
        inertia = new_inertia
        if gain <= tol * (inertia + gain):
            break
    return Centroids(centers, inertia)


def kmeans_assign(points, centroids: Centroids | np.ndarray) -> np.ndarray:
    """Nearest-centroid index per point (squared Euclidean, lowest index on ties)."""
    c = centroids.values if isinstance(centroids, Centroids) else np.asarray(centroids, dtype=np.float64)
    x = _check_points(points)
    if x.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: points have {x.shape[1]}, centroids {c.shape[1]}")
    return nearest(x, c)[0]
