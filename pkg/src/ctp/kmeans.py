"""Lloyd's k-means with k-means++ seeding and best-of-restarts selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KMeansConfig:
    restarts: int = 10
    max_iter: int = 100
    tol: float = 1e-6


def _sq_dists(points: np.ndarray, means: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2 * points @ means.T + (means * means).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(points, points[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[[nxt]])[:, 0])
    return points[idx].copy()


def sse(points: np.ndarray, assignments: np.ndarray, means: np.ndarray) -> float:
    diff = points - means[assignments]
    return float((diff * diff).sum())


def _lloyd(points, means, max_iter, tol):
    k = len(means)
    for _ in range(max_iter):
        d = _sq_dists(points, means)
        assign = d.argmin(axis=1)
        new = np.empty_like(means)
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its mean
                far = int(d[np.arange(len(points)), assign].argmax())
                new[c] = points[far]
                assign[far] = c
        shift = np.sqrt(((new - means) ** 2).sum(axis=1)).max()
        means = new
        if shift < tol:
            break
    assign = _sq_dists(points, means).argmin(axis=1)
    return assign, means


def kmeans(points, k: int, restarts: int = 10, max_iter: int = 100, tol: float = 1e-6,
           seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cluster ``points`` into ``k`` groups; returns ``(assignments, means)`` of the best restart."""
    points = np.asarray(points, dtype=np.float64)
    if k <= 0:
        raise ValueError("kmeans: k must be >= 1")
    if len(points) < k:
        raise ValueError(f"kmeans: {len(points)} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        assign, means = _lloyd(points, kmeans_plusplus(points, k, rng), max_iter, tol)
        score = sse(points, assign, means)
        if best is None or score < best[0] - 1e-12:
            best = (score, assign, means)
    return best[1], best[2]
