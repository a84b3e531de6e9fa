"""Density-based clustering with a pairwise-distance counter.

Points are visited in index order and neighbours expanded in index order,
so the output (including the assignment of border points shared by two
clusters) is fully deterministic.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

NOISE = -1


@dataclass(frozen=True)
class DbscanLabeling:
    labels: np.ndarray  # cluster id per point, NOISE for noise
    n_clusters: int
    distance_evals: int = 0


def dbscan(points, eps: float, min_pts: int) -> DbscanLabeling:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 2:
        raise ValueError("min_pts must be >= 2")
    n = pts.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    evals = 0

    def region(i):
        nonlocal evals
        evals += n
        d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
        return np.flatnonzero(d <= eps)

    cluster = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        nb = region(i)
        if nb.size < min_pts:
            continue
        labels[i] = cluster
        queue = deque(int(j) for j in nb)
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            nb_j = region(j)
            if nb_j.size >= min_pts:
                queue.extend(int(k) for k in nb_j)
        cluster += 1
    return DbscanLabeling(labels, cluster, evals)
