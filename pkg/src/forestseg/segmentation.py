"""Grouping of per-point network outputs into tree instances.

Points whose semantic score passes the threshold are shifted by their
predicted offset towards the tree base, clustered with DBSCAN, and leftover
noise points join the nearest cluster within ``assign_radius``.
"""

from __future__ import annotations

__all__ = [
    "PredictionSet",
    "ClusterParams",
    "semantic_classify",
    "apply_offsets",
    "density_cluster",
    "assign_remaining",
    "renumber_by_first_index",
    "segment",
]

from dataclasses import asdict, dataclass
from typing import Optional

import numba
import numpy as np
import numpy.typing as npt

from .index import SpatialIndex, _column_slices, _count_kernel, _slice_buffer
from .parallel import run_chunked
from .propagation import _flatten, _union


@dataclass
class PredictionSet:
    """Per-point semantic tree probability and 3D offset towards the tree base."""

    semantic_score: npt.NDArray[np.float64]
    offset: npt.NDArray[np.float64]

    def __post_init__(self):
        self.semantic_score = np.ascontiguousarray(self.semantic_score, dtype=np.float64).reshape(-1)
        self.offset = np.ascontiguousarray(self.offset, dtype=np.float64).reshape(-1, 3)
        if len(self.semantic_score) != len(self.offset):
            raise ValueError(
                f"score count {len(self.semantic_score)} does not match offset count {len(self.offset)}"
            )
        score = self.semantic_score
        if not ((score >= 0) & (score <= 1)).all():
            bad = int(np.flatnonzero(~((score >= 0) & (score <= 1)))[0])
            raise ValueError(f"semantic score {score[bad]} at point {bad} is outside [0, 1]")
        if not np.isfinite(self.offset).all():
            raise ValueError("offsets contain non-finite values")

    def __len__(self) -> int:
        return len(self.semantic_score)

    def subset(self, indices: npt.ArrayLike) -> "PredictionSet":
        return PredictionSet(self.semantic_score[indices], self.offset[indices])


@dataclass(frozen=True)
class ClusterParams:
    """Clustering hyperparameters.

    Args:
        semantic_threshold: Minimum tree probability of a point to be clustered.
        eps: DBSCAN neighborhood radius in meters.
        min_pts: Neighbors (self included) a core point needs within ``eps``.
        assign_radius: Maximum shifted-space distance for attaching noise points
            to a cluster.
        cluster_dims: 3 clusters shifted points in 3D; 2 ignores z.
    """

    semantic_threshold: float = 0.5
    eps: float = 0.6
    min_pts: int = 100
    assign_radius: float = 1.5
    cluster_dims: int = 3

    def __post_init__(self):
        if not 0 < self.semantic_threshold < 1:
            raise ValueError(f"semantic_threshold must lie in (0, 1), got {self.semantic_threshold}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be at least 1, got {self.min_pts}")
        if self.assign_radius < 0:
            raise ValueError(f"assign_radius must be non-negative, got {self.assign_radius}")
        if self.cluster_dims not in (2, 3):
            raise ValueError(f"cluster_dims must be 2 or 3, got {self.cluster_dims}")

    def to_dict(self) -> dict:
        return asdict(self)


def semantic_classify(pred: PredictionSet, threshold: float = 0.5) -> npt.NDArray[np.bool_]:
    """Tree mask: score at or above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return pred.semantic_score >= threshold


def apply_offsets(
    points: npt.ArrayLike, offsets: npt.ArrayLike, mask: npt.ArrayLike
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    """Shift masked points by their offsets.

    Returns:
        ``(shifted, indices)``: shifted coordinates of the masked points and
        their indices in the input.
    """
    points = np.asarray(points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (len(points) == len(offsets) == len(mask)):
        raise ValueError("points, offsets and mask must have equal length")
    indices = np.flatnonzero(mask)
    return points[indices] + offsets[indices], indices


def renumber_by_first_index(ids: npt.ArrayLike) -> npt.NDArray[np.int64]:
    """Relabel positive ids to ``1..k`` by ascending first occurrence; non-positive ids become 0."""
    ids = np.asarray(ids)
    out = np.zeros(len(ids), dtype=np.int64)
    positive = np.flatnonzero(ids > 0)
    if len(positive) == 0:
        return out
    values, first, inverse = np.unique(ids[positive], return_index=True, return_inverse=True)
    rank = np.empty(len(values), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(1, len(values) + 1)
    out[positive] = rank[inverse]
    return out


@numba.njit(cache=True, nogil=True)
def _link_core_kernel(points, core, r, spoints, order, keys, starts, origin, dims, cell_size, slices, parent):
    r2 = r * r
    for i in range(points.shape[0]):
        if not core[i]:
            continue
        q = points[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                j = order[k]
                if j <= i or not core[j]:
                    continue
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    _union(parent, i, j)


@numba.njit(cache=True, nogil=True)
def _nearest_kernel(
    start, stop, queries, active, target, r, spoints, order, keys, starts, origin, dims, cell_size, slices, out
):
    """Nearest indexed point within ``r`` (ties to the smallest index), optionally restricted to ``target``."""
    r2 = r * r
    slices = slices.copy()
    for i in range(start, stop):
        if not active[i]:
            continue
        q = queries[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        best = -1
        best_d2 = np.inf
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                j = order[k]
                if not target[j]:
                    continue
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 <= r2 and (d2 < best_d2 or (d2 == best_d2 and j < best)):
                    best = j
                    best_d2 = d2
        out[i] = best


@numba.njit(cache=True, nogil=True)
def _first_core_kernel(start, stop, points, core, r, spoints, order, keys, starts, origin, dims, cell_size, slices, out):
    r2 = r * r
    slices = slices.copy()
    for i in range(start, stop):
        if core[i]:
            continue
        q = points[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        best = -1
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                j = order[k]
                if not core[j] or (best >= 0 and j >= best):
                    continue
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    best = j
        out[i] = best


def _cluster_space(points: npt.ArrayLike, dims: int) -> np.ndarray:
    points = np.array(points, dtype=np.float64).reshape(-1, 3)
    if dims == 2:
        points[:, 2] = 0.0
    return np.ascontiguousarray(points)


def density_cluster(
    shifted: npt.ArrayLike, params: ClusterParams = ClusterParams(), workers: Optional[int] = None
) -> npt.NDArray[np.int64]:
    """DBSCAN over shifted points.

    A core point has at least ``min_pts`` points (itself included) within the
    closed ``eps`` ball. Clusters are the connected components of core points.
    A non-core point within ``eps`` of a core point joins the cluster of its
    lowest-index core neighbor; all other points are noise (id 0). Cluster ids
    are ``1..k`` in order of each cluster's smallest member index.
    """
    points = _cluster_space(shifted, params.cluster_dims)
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    eps = float(params.eps)
    index = SpatialIndex(points, eps)
    arrays = (index.sorted_points, index.order, index.keys, index.starts, index.origin, index.dims, index.cell_size)
    slices = _slice_buffer(eps, eps)

    counts = np.zeros(n, dtype=np.int64)
    run_chunked(
        _count_kernel,
        n,
        workers,
        points,
        eps,
        index.sorted_points,
        index.keys,
        index.starts,
        index.origin,
        index.dims,
        index.cell_size,
        slices,
        counts,
    )
    core = counts >= params.min_pts
    if not core.any():
        return np.zeros(n, dtype=np.int64)

    parent = np.arange(n, dtype=np.int64)
    _link_core_kernel(points, core, eps, *arrays, slices.copy(), parent)
    _flatten(parent)

    first_core = np.full(n, -1, dtype=np.int64)
    run_chunked(_first_core_kernel, n, workers, points, core, eps, *arrays, slices, first_core)

    roots = np.full(n, -1, dtype=np.int64)
    roots[core] = parent[core]
    border = ~core & (first_core >= 0)
    roots[border] = parent[first_core[border]]
    # Shift by one so root 0 stays distinguishable from noise.
    return renumber_by_first_index(roots + 1)


def assign_remaining(
    shifted: npt.ArrayLike,
    instance_ids: npt.ArrayLike,
    assign_radius: float = 1.5,
    workers: Optional[int] = None,
    cluster_dims: int = 3,
) -> npt.NDArray[np.int64]:
    """Attach noise points (id 0) to the nearest clustered point within ``assign_radius``.

    Distances are measured between shifted coordinates; equidistant candidates
    resolve to the smallest point index. Returns the input unchanged when no
    cluster exists.
    """
    ids = np.asarray(instance_ids, dtype=np.int64).copy()
    clustered = ids > 0
    noise = ~clustered
    if not clustered.any() or not noise.any():
        return ids
    points = _cluster_space(shifted, cluster_dims)
    radius = float(assign_radius)
    # A zero radius still needs a positive cell edge; only exact coincidences match.
    index = SpatialIndex(points, max(radius, 1e-6))
    nearest = np.full(len(ids), -1, dtype=np.int64)
    run_chunked(
        _nearest_kernel,
        len(ids),
        workers,
        points,
        noise,
        clustered,
        radius,
        index.sorted_points,
        index.order,
        index.keys,
        index.starts,
        index.origin,
        index.dims,
        index.cell_size,
        _slice_buffer(radius, index.cell_size),
        nearest,
    )
    hit = noise & (nearest >= 0)
    ids[hit] = ids[nearest[hit]]
    return ids


def segment(
    points: npt.ArrayLike,
    pred: PredictionSet,
    params: ClusterParams = ClusterParams(),
    workers: Optional[int] = None,
) -> npt.NDArray[np.int64]:
    """Untiled grouping: classify, shift, cluster, attach noise.

    Returns:
        Instance id per input point; 0 for non-tree and unassigned points.
        Ids are ``1..k`` ordered by each instance's smallest point index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(pred):
        raise ValueError(f"cloud has {len(points)} points but predictions cover {len(pred)}")
    mask = semantic_classify(pred, params.semantic_threshold)
    shifted, indices = apply_offsets(points, pred.offset, mask)
    local = density_cluster(shifted, params, workers)
    local = assign_remaining(shifted, local, params.assign_radius, workers, params.cluster_dims)
    ids = np.zeros(len(points), dtype=np.int64)
    ids[indices] = local
    return renumber_by_first_index(ids)
