"""Height above ground from a coarse raster ground model."""

from __future__ import annotations

__all__ = ["ground_grid", "ground_normalize"]

from typing import Tuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from .cloud import LabeledCloud

GROUND_PERCENTILE = 5.0


def ground_grid(
    points: npt.NDArray[np.float64], grid_cell: float = 2.0, percentile: float = GROUND_PERCENTILE
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    """Per-cell low-percentile ground elevation on a 2D grid.

    Empty cells take the value of the nearest non-empty cell (Euclidean distance
    in cell units).

    Returns:
        ``(grid, cell_index)``: the ``(nx, ny)`` ground raster and each point's
        ``(ix, iy)`` cell, shape ``(n, 2)``.
    """
    if not grid_cell > 0:
        raise ValueError(f"grid_cell must be positive, got {grid_cell}")
    if len(points) == 0:
        raise ValueError("cannot estimate ground of an empty cloud")
    xy_min = points[:, :2].min(axis=0)
    cell_index = np.floor((points[:, :2] - xy_min) / grid_cell).astype(np.int64)
    nx, ny = cell_index.max(axis=0) + 1
    flat = cell_index[:, 0] * ny + cell_index[:, 1]

    order = np.lexsort((points[:, 2], flat))
    sorted_flat = flat[order]
    sorted_z = points[order, 2]
    cells, first, counts = np.unique(sorted_flat, return_index=True, return_counts=True)
    # Linear-interpolated percentile within each cell's sorted z run.
    pos = (counts - 1) * (percentile / 100.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, counts - 1)
    frac = pos - lo
    values = sorted_z[first + lo] * (1.0 - frac) + sorted_z[first + hi] * frac

    grid = np.full(nx * ny, np.nan)
    grid[cells] = values
    grid = grid.reshape(nx, ny)
    empty = np.isnan(grid)
    if empty.any():
        nearest = ndimage.distance_transform_edt(empty, return_distances=False, return_indices=True)
        grid = grid[nearest[0], nearest[1]]
    return grid, cell_index


def ground_normalize(cloud: LabeledCloud, grid_cell: float = 2.0) -> npt.NDArray[np.float64]:
    """Compute each point's height above the ground model and store it on ``cloud.heights``.

    The ground elevation of a grid cell is the 5th percentile of the z values of
    the points falling into it.
    """
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty cloud")
    grid, cell_index = ground_grid(cloud.points, grid_cell)
    heights = cloud.points[:, 2] - grid[cell_index[:, 0], cell_index[:, 1]]
    cloud.heights = heights
    return heights
