"""Sliding-window segmentation of clouds too large to process in one piece.

The 2D bounding box is partitioned into inner boxes. Each inner box is wrapped
by an outer box that adds a context margin of ``(tile_size - inner_size) / 2``
on every side. Every tile is segmented on its outer-box points, each point
keeps the instance from the tile whose inner box holds it, and instances of
different tiles are merged when they largely agree inside the region where
the outer boxes overlap.
"""

from __future__ import annotations

__all__ = ["Tile", "TilePlan", "plan_tiles", "plan_for_cloud", "segment_tiled"]

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .parallel import resolve_workers
from .segmentation import ClusterParams, PredictionSet, renumber_by_first_index, segment

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]

# Relative tolerance when counting how many inner boxes fit along an axis.
_FIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Tile:
    inner: Box
    outer: Box
    ix: int
    iy: int


@dataclass
class TilePlan:
    """Partition of a 2D box into inner boxes with overlapping outer context boxes."""

    bounds: Box
    tile_size: float = 35.0
    inner_size: float = 8.0
    nx: int = 1
    ny: int = 1
    tiles: List[Tile] = field(default_factory=list)

    @property
    def stride(self) -> float:
        return self.inner_size

    def inner_tile_of(self, xy: npt.ArrayLike) -> npt.NDArray[np.int64]:
        """Index into :attr:`tiles` of the inner box holding each ``(x, y)``."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        xmin, ymin = self.bounds[0], self.bounds[1]
        if self.nx == 1 and self.ny == 1:
            return np.zeros(len(xy), dtype=np.int64)
        ix = np.clip(np.floor((xy[:, 0] - xmin) / self.inner_size), 0, self.nx - 1).astype(np.int64)
        iy = np.clip(np.floor((xy[:, 1] - ymin) / self.inner_size), 0, self.ny - 1).astype(np.int64)
        return ix * self.ny + iy

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "tile_size": self.tile_size,
            "inner_size": self.inner_size,
            "nx": self.nx,
            "ny": self.ny,
        }


def _axis_count(extent: float, inner: float) -> int:
    return max(1, math.ceil(extent / inner - _FIT_TOLERANCE))


def plan_tiles(bounds: Box, tile_size: float = 35.0, inner_size: float = 8.0) -> TilePlan:
    """Tile ``bounds = (xmin, ymin, xmax, ymax)``.

    Inner boxes start at the lower-left corner with edge ``inner_size``; the
    last row and column are cut at the bounds. Outer boxes extend the inner box
    by half the size difference on each side, clamped to the bounds. Bounds of
    zero area yield one tile covering them.
    """
    if not inner_size > 0:
        raise ValueError(f"inner_size must be positive, got {inner_size}")
    if tile_size < inner_size:
        raise ValueError(f"tile_size {tile_size} is smaller than inner_size {inner_size}")
    xmin, ymin, xmax, ymax = (float(v) for v in bounds)
    if xmax < xmin or ymax < ymin:
        raise ValueError(f"invalid bounds {bounds}")
    width, height = xmax - xmin, ymax - ymin
    if width == 0 or height == 0:
        box = (xmin, ymin, xmax, ymax)
        return TilePlan(box, tile_size, inner_size, 1, 1, [Tile(box, box, 0, 0)])

    nx, ny = _axis_count(width, inner_size), _axis_count(height, inner_size)
    margin = (tile_size - inner_size) / 2
    tiles = []
    for ix in range(nx):
        x0 = xmin + ix * inner_size
        x1 = xmax if ix == nx - 1 else xmin + (ix + 1) * inner_size
        for iy in range(ny):
            y0 = ymin + iy * inner_size
            y1 = ymax if iy == ny - 1 else ymin + (iy + 1) * inner_size
            outer = (max(xmin, x0 - margin), max(ymin, y0 - margin), min(xmax, x1 + margin), min(ymax, y1 + margin))
            tiles.append(Tile((x0, y0, x1, y1), outer, ix, iy))
    return TilePlan((xmin, ymin, xmax, ymax), tile_size, inner_size, nx, ny, tiles)


def plan_for_cloud(points: npt.ArrayLike, tile_size: float = 35.0, inner_size: float = 8.0) -> TilePlan:
    points = np.asarray(points, dtype=np.float64)
    lo = points[:, :2].min(axis=0)
    hi = points[:, :2].max(axis=0)
    return plan_tiles((lo[0], lo[1], hi[0], hi[1]), tile_size, inner_size)


def _in_box(xy: np.ndarray, box: Box) -> np.ndarray:
    return (xy[:, 0] >= box[0]) & (xy[:, 0] <= box[2]) & (xy[:, 1] >= box[1]) & (xy[:, 1] <= box[3])


def _intersect(a: Box, b: Box) -> Optional[Box]:
    box = (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))
    if box[0] > box[2] or box[1] > box[3]:
        return None
    return box


def _adjacent_pairs(plan: TilePlan) -> List[Tuple[int, int]]:
    """Index pairs of tiles that share an edge or a corner, in row-major order."""
    pairs = []
    for a, tile in enumerate(plan.tiles):
        for dx, dy in ((0, 1), (1, -1), (1, 0), (1, 1)):
            ix, iy = tile.ix + dx, tile.iy + dy
            if 0 <= ix < plan.nx and 0 <= iy < plan.ny:
                pairs.append((a, ix * plan.ny + iy))
    return pairs


def _find(parent: list, i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def segment_tiled(
    points: npt.ArrayLike,
    pred: PredictionSet,
    params: ClusterParams = ClusterParams(),
    plan: Optional[TilePlan] = None,
    merge_fraction: float = 0.5,
    workers: Optional[int] = None,
) -> npt.NDArray[np.int64]:
    """Segment tile by tile and merge instances across tiles.

    Two instances from adjacent tiles (sharing an edge or a corner) merge when,
    among the points of the region shared by both outer boxes, the points they have in common make up
    at least ``merge_fraction`` of either instance's points there.

    Returns:
        Instance id per point, ``1..k`` ordered by smallest point index; 0 for
        non-tree and unassigned points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(pred):
        raise ValueError(f"cloud has {len(points)} points but predictions cover {len(pred)}")
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    if plan is None:
        plan = plan_for_cloud(points)
    xy = points[:, :2]
    owner = plan.inner_tile_of(xy)
    members = [np.flatnonzero(_in_box(xy, tile.outer) | (owner == t)) for t, tile in enumerate(plan.tiles)]

    def run(t: int) -> np.ndarray:
        sel = members[t]
        if len(sel) == 0:
            return np.zeros(0, dtype=np.int64)
        return segment(points[sel], pred.subset(sel), params, workers=1)

    workers = resolve_workers(workers)
    if workers == 1 or len(plan.tiles) == 1:
        local = [run(t) for t in range(len(plan.tiles))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            local = list(pool.map(run, range(len(plan.tiles))))

    # Global node id of (tile t, local id l > 0) is base[t] + l - 1.
    sizes = [int(ids.max()) if len(ids) else 0 for ids in local]
    base = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    parent = list(range(int(base[-1])))

    n_merges = 0
    for a, b in _adjacent_pairs(plan):
        region = _intersect(plan.tiles[a].outer, plan.tiles[b].outer)
        if region is None or len(members[a]) == 0 or len(members[b]) == 0:
            continue
        in_a = _in_box(xy[members[a]], region)
        shared_points = members[a][in_a]
        if len(shared_points) == 0:
            continue
        la = local[a][in_a]
        lb = local[b][np.searchsorted(members[b], shared_points)]
        ids_a, count_a = np.unique(la[la > 0], return_counts=True)
        ids_b, count_b = np.unique(lb[lb > 0], return_counts=True)
        both = (la > 0) & (lb > 0)
        pairs, shared = np.unique(np.stack([la[both], lb[both]]), axis=1, return_counts=True)
        total_a = dict(zip(ids_a.tolist(), count_a.tolist()))
        total_b = dict(zip(ids_b.tolist(), count_b.tolist()))
        for (ia, ib), common in zip(pairs.T.tolist(), shared.tolist()):
            if max(common / total_a[ia], common / total_b[ib]) >= merge_fraction:
                ra = _find(parent, int(base[a]) + ia - 1)
                rb = _find(parent, int(base[b]) + ib - 1)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
                    n_merges += 1

    roots = np.array([_find(parent, i) for i in range(len(parent))], dtype=np.int64)
    result = np.zeros(len(points), dtype=np.int64)
    for t, sel in enumerate(members):
        if len(sel) == 0:
            continue
        keep = owner[sel] == t
        ids = local[t][keep]
        assigned = ids > 0
        result[sel[keep][assigned]] = roots[base[t] + ids[assigned] - 1] + 1
    logger.info("tiled segmentation: %d tiles, %d cross-tile merges", len(plan.tiles), n_merges)
    return renumber_by_first_index(result)
