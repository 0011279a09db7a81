"""Uniform voxel-hash grid for fixed-radius neighbor queries.

Points are bucketed into cubic cells of side ``cell_size`` with
``cell = floor(coordinate / cell_size)``. Cells are stored as a sorted array of
integer keys with CSR-style point ranges, so the points of all cells sharing an
``(x, y)`` column and a contiguous ``z`` range are one contiguous slice. A query
of radius ``r <= cell_size`` touches at most 3 x 3 columns (27 cells).

All neighborhoods are closed balls: a point at distance exactly ``r`` is a
neighbor.
"""

from __future__ import annotations

__all__ = ["SpatialIndex", "build_index", "radius_query", "radius_query_many"]

from typing import Dict, List, Optional, Tuple

import numba
import numpy as np
import numpy.typing as npt

from .parallel import run_chunked

# Widens the scanned cell range so floating-point rounding in the cell division
# can never drop a neighbor sitting on a cell face.
_CELL_SLACK = 1e-7


class SpatialIndex:
    """Immutable voxel-hash index over a fixed point set.

    Args:
        points: Indexed coordinates, shape ``(n, 3)``.
        cell_size: Cell edge length in meters.
    """

    def __init__(self, points: npt.ArrayLike, cell_size: float):
        if not cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {cell_size}")
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {points.shape}")
        if not np.isfinite(points).all():
            raise ValueError("points contain non-finite coordinates")

        self.cell_size = float(cell_size)
        self.points = points
        cells = np.floor(points / self.cell_size).astype(np.int64)
        if len(points):
            self.origin = cells.min(axis=0)
            self.dims = cells.max(axis=0) - self.origin + 1
        else:
            self.origin = np.zeros(3, dtype=np.int64)
            self.dims = np.ones(3, dtype=np.int64)
        if float(np.prod(self.dims.astype(np.float64))) >= 2.0**62:
            raise ValueError("point extent too large for the requested cell_size")
        local = cells - self.origin
        point_keys = (local[:, 0] * self.dims[1] + local[:, 1]) * self.dims[2] + local[:, 2]
        self.order = np.argsort(point_keys, kind="stable").astype(np.int64)
        sorted_keys = point_keys[self.order]
        self.keys, first = np.unique(sorted_keys, return_index=True)
        self.starts = np.append(first, len(points)).astype(np.int64)
        self.sorted_points = np.ascontiguousarray(points[self.order])

    def __len__(self) -> int:
        return len(self.points)

    @property
    def cells(self) -> Dict[Tuple[int, int, int], List[int]]:
        """Mapping from integer cell coordinates to the point indices they hold."""
        result = {}
        dz = int(self.dims[2])
        dyz = int(self.dims[1]) * dz
        for c, key in enumerate(self.keys.tolist()):
            cell = (
                key // dyz + int(self.origin[0]),
                (key % dyz) // dz + int(self.origin[1]),
                key % dz + int(self.origin[2]),
            )
            result[cell] = sorted(self.order[self.starts[c] : self.starts[c + 1]].tolist())
        return result

    def cell_of(self, point: npt.ArrayLike) -> Tuple[int, int, int]:
        cell = np.floor(np.asarray(point, dtype=np.float64) / self.cell_size).astype(np.int64)
        return int(cell[0]), int(cell[1]), int(cell[2])

    def _arrays(self):
        return self.sorted_points, self.order, self.keys, self.starts, self.origin, self.dims, self.cell_size


def build_index(points: npt.ArrayLike, cell_size: float) -> SpatialIndex:
    """Bucket ``points`` into a voxel hash of edge ``cell_size``."""
    return SpatialIndex(points, cell_size)


# kernels


@numba.njit(cache=True, nogil=True)
def _axis_range(q, r, cell_size, origin, dim):
    lo = np.int64(np.floor((q - r) / cell_size - _CELL_SLACK)) - origin
    hi = np.int64(np.floor((q + r) / cell_size + _CELL_SLACK)) - origin
    if lo < 0:
        lo = 0
    if hi > dim - 1:
        hi = dim - 1
    return lo, hi


@numba.njit(cache=True, nogil=True)
def _column_slices(q, r, keys, starts, origin, dims, cell_size, out):
    """Fill ``out`` with ``[begin, end)`` sorted-point slices; returns how many are used."""
    x0, x1 = _axis_range(q[0], r, cell_size, origin[0], dims[0])
    y0, y1 = _axis_range(q[1], r, cell_size, origin[1], dims[1])
    z0, z1 = _axis_range(q[2], r, cell_size, origin[2], dims[2])
    n = 0
    if x0 > x1 or y0 > y1 or z0 > z1:
        return n
    for cx in range(x0, x1 + 1):
        for cy in range(y0, y1 + 1):
            base = (cx * dims[1] + cy) * dims[2]
            a = np.searchsorted(keys, base + z0)
            b = np.searchsorted(keys, base + z1 + 1)
            if a < b:
                out[n, 0] = starts[a]
                out[n, 1] = starts[b]
                n += 1
    return n


def _slice_buffer(r: float, cell_size: float) -> np.ndarray:
    width = int(np.ceil(2 * r / cell_size)) + 3
    return np.empty((width * width, 2), dtype=np.int64)


@numba.njit(cache=True, nogil=True)
def _count_kernel(start, stop, queries, r, spoints, keys, starts, origin, dims, cell_size, slices, counts):
    r2 = r * r
    slices = slices.copy()
    for i in range(start, stop):
        q = queries[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        c = 0
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    c += 1
        counts[i] = c


@numba.njit(cache=True, nogil=True)
def _fill_kernel(start, stop, queries, r, spoints, order, keys, starts, origin, dims, cell_size, slices, offsets, out):
    r2 = r * r
    slices = slices.copy()
    for i in range(start, stop):
        q = queries[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        pos = offsets[i]
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    out[pos] = order[k]
                    pos += 1
        out[offsets[i] : pos].sort()


def radius_query_many(
    index: SpatialIndex, centers: npt.ArrayLike, r: float, workers: Optional[int] = None
) -> Tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Closed-ball neighbors of many centers in CSR form.

    Returns:
        ``(offsets, indices)`` where the neighbors of center ``i`` are
        ``indices[offsets[i]:offsets[i + 1]]`` in ascending order.
    """
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    spoints, order, keys, starts, origin, dims, cell_size = index._arrays()
    slices = _slice_buffer(r, cell_size)
    counts = np.zeros(len(centers), dtype=np.int64)
    run_chunked(
        _count_kernel, len(centers), workers, centers, float(r), spoints, keys, starts, origin, dims, cell_size, slices, counts
    )
    offsets = np.zeros(len(centers) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    out = np.empty(offsets[-1], dtype=np.int64)
    run_chunked(
        _fill_kernel,
        len(centers),
        workers,
        centers,
        float(r),
        spoints,
        order,
        keys,
        starts,
        origin,
        dims,
        cell_size,
        slices,
        offsets,
        out,
    )
    return offsets, out


@numba.njit(cache=True, nogil=True)
def _single_query(q, r, spoints, order, keys, starts, origin, dims, cell_size, slices):
    r2 = r * r
    n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
    total = 0
    for s in range(n):
        total += slices[s, 1] - slices[s, 0]
    out = np.empty(total, dtype=np.int64)
    c = 0
    for s in range(n):
        for k in range(slices[s, 0], slices[s, 1]):
            dx = spoints[k, 0] - q[0]
            dy = spoints[k, 1] - q[1]
            dz = spoints[k, 2] - q[2]
            if dx * dx + dy * dy + dz * dz <= r2:
                out[c] = order[k]
                c += 1
    result = out[:c].copy()
    result.sort()
    return result


def radius_query(index: SpatialIndex, center: npt.ArrayLike, r: float) -> npt.NDArray[np.int64]:
    """Indices (ascending) of all indexed points within distance ``r`` of ``center``, boundary included.

    ``r`` may exceed the cell size; the scan then covers more cells.
    """
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    q = np.asarray(center, dtype=np.float64).reshape(3)
    spoints, order, keys, starts, origin, dims, cell_size = index._arrays()
    return _single_query(q, float(r), spoints, order, keys, starts, origin, dims, cell_size, _slice_buffer(r, cell_size))
