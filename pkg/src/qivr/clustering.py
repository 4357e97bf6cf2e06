"""Seeded k-means (Lloyd's algorithm with k-means++ initialization).

Used for GMM initialization and for training vector-quantizer hashes.
All randomness flows through the caller-supplied generator, so results are
pure functions of (data, k, rng state).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InsufficientData


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick k initial centers by k-means++ seeding (D^2 sampling)."""
    n = points.shape[0]
    if n < k:
        raise InsufficientData(f"k-means++ needs >= {k} points, got {n}")
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at existing centers; fall back to uniform
            idx = int(rng.integers(n))
        else:
            u = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def lloyd_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                 max_iters: int = 50) -> np.ndarray:
    """Run Lloyd's iterations from a k-means++ start; returns (k, d) centers.

    Empty clusters keep their previous center. Stops early once assignments
    reach a fixed point.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = kmeans_pp_init(points, k, rng)
    dim = points.shape[1]
    prev_labels = None
    for _ in range(max_iters):
        labels, _ = kernels.assign_nearest(points, centers)
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        counts = np.bincount(labels, minlength=k)
        new_centers = centers.copy()
        for j in range(dim):
            sums = np.bincount(labels, weights=points[:, j], minlength=k)
            nonempty = counts > 0
            new_centers[nonempty, j] = sums[nonempty] / counts[nonempty]
        centers = new_centers
        prev_labels = labels
    return centers
