"""Exact k-nearest-neighbour and radius queries.

A kd-tree accelerates the search; distances are recomputed in plain numpy
and re-sorted so results match a brute-force scan exactly, including the
tie rule (equal distances resolve to the lower point index).
"""
from __future__ import annotations

from typing import Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

# Worker count for kd-tree queries; set from the CLI --threads flag.
_WORKERS = 1


def set_worker_count(workers: int) -> None:
    global _WORKERS
    _WORKERS = int(workers)


def _cloud_array(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.xyz
    return np.asarray(cloud, dtype=np.float64)


def _exact_knn_one(pts: np.ndarray, tree: cKDTree, q: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    n = len(pts)
    _, idx = tree.query(q, k=k)
    idx = np.atleast_1d(idx)
    dist = np.sqrt(((pts[idx] - q) ** 2).sum(axis=1))
    dk = dist.max()
    if k < n:
        # A candidate outside the kd-tree's pick may tie the k-th distance;
        # pull everything within it (tiny slop for arithmetic differences).
        cand = np.asarray(tree.query_ball_point(q, r=dk * (1.0 + 1e-12) + 1e-300), dtype=np.int64)
        if len(cand) > k:
            idx = np.union1d(cand, idx)
            dist = np.sqrt(((pts[idx] - q) ** 2).sum(axis=1))
    order = np.lexsort((idx, dist))[:k]
    return idx[order], dist[order]


def knn(cloud: Union[PointCloud, np.ndarray], query, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the k nearest points to `query`.

    Sorted by ascending distance, ties broken by lower index. `query` may be
    a single point (3,) or a batch (q, 3); batch results are stacked (q, k).
    """
    pts = _cloud_array(cloud)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(pts):
        raise ValueError(f"k = {k} exceeds cloud size {len(pts)}")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    qs = np.atleast_2d(q)
    tree = cKDTree(pts)
    indices = np.empty((len(qs), k), dtype=np.int64)
    distances = np.empty((len(qs), k), dtype=np.float64)
    for row, point in enumerate(qs):
        indices[row], distances[row] = _exact_knn_one(pts, tree, point, k)
    if single:
        return indices[0], distances[0]
    return indices, distances


def radius_neighbors(cloud: Union[PointCloud, np.ndarray], query, radius: float):
    """Indices and distances of all points within `radius` of `query`.

    Inclusive boundary (distance <= radius), sorted by ascending index.
    Batched queries return lists of per-query arrays (counts vary).
    """
    pts = _cloud_array(cloud)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    qs = np.atleast_2d(q)
    tree = cKDTree(pts)
    out_idx, out_dist = [], []
    for point in qs:
        cand = np.asarray(
            tree.query_ball_point(point, r=radius * (1.0 + 1e-12) + 1e-300), dtype=np.int64
        )
        cand.sort()
        dist = np.sqrt(((pts[cand] - point) ** 2).sum(axis=1)) if len(cand) else np.empty(0)
        keep = dist <= radius
        out_idx.append(cand[keep])
        out_dist.append(dist[keep])
    if single:
        return out_idx[0], out_dist[0]
    return out_idx, out_dist


def kdtree(cloud: Union[PointCloud, np.ndarray]) -> cKDTree:
    """Raw kd-tree over the cloud, for internal bulk queries."""
    return cKDTree(_cloud_array(cloud))


def query_workers() -> int:
    return _WORKERS
