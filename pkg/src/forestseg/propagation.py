"""Propagation of published per-tree labels onto a complete raw forest cloud.

The full procedure runs four stages in order:

1. every raw point takes the most common tree id among seed points within
   ``propagate_radius`` (ties go to the smallest id);
2. the remaining unlabeled points are linked when closer than
   ``linkage_radius`` and the largest connected component becomes non-tree;
3. whatever is still unlabeled becomes non-annotated;
4. trees whose highest point stays below ``min_tree_height`` are relabeled
   non-tree.
"""

from __future__ import annotations

__all__ = [
    "PropagationParams",
    "PropagationSummary",
    "NoUnlabeledPointsWarning",
    "propagate_tree_labels",
    "connected_components",
    "extract_non_tree",
    "assign_non_annotated",
    "filter_small_trees",
    "propagate_full",
]

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numba
import numpy as np
import numpy.typing as npt

from .cloud import NON_ANNOTATED, NON_TREE, UNLABELED, LabeledCloud, class_counts, tree_counts
from .ground import ground_normalize
from .index import SpatialIndex, _column_slices, _slice_buffer
from .parallel import run_chunked

logger = logging.getLogger(__name__)


class NoUnlabeledPointsWarning(UserWarning):
    """Non-tree extraction found no unlabeled points and left the cloud unchanged."""


@dataclass(frozen=True)
class PropagationParams:
    propagate_radius: float = 0.1
    linkage_radius: float = 0.3
    min_tree_height: float = 10.0
    ground_cell: float = 2.0

    def __post_init__(self):
        for name in ("propagate_radius", "linkage_radius", "min_tree_height", "ground_cell"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PropagationSummary:
    """Counts emitted after propagation for the visual inspection step."""

    class_counts: Dict[str, int]
    tree_counts: Dict[int, int]
    params: PropagationParams
    removed_small_trees: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_counts": self.class_counts,
            "tree_counts": {str(k): v for k, v in self.tree_counts.items()},
            "n_trees": len(self.tree_counts),
            "removed_small_trees": self.removed_small_trees,
            "params": self.params.to_dict(),
        }


# step 1


@numba.njit(cache=True, nogil=True)
def _majority_kernel(
    start, stop, queries, active, r, spoints, seed_labels, keys, starts, origin, dims, cell_size, slices, out
):
    r2 = r * r
    slices = slices.copy()
    buffer = np.empty(64, dtype=np.int32)
    for i in range(start, stop):
        if not active[i]:
            continue
        q = queries[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        c = 0
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    if c == buffer.shape[0]:
                        grown = np.empty(2 * c, dtype=np.int32)
                        grown[:c] = buffer
                        buffer = grown
                    buffer[c] = seed_labels[k]
                    c += 1
        if c == 0:
            continue
        votes = np.sort(buffer[:c])
        best = votes[0]
        best_count = 0
        run = 0
        for j in range(c):
            if j > 0 and votes[j] == votes[j - 1]:
                run += 1
            else:
                run = 1
            # Strictly greater keeps the smallest id among equal counts.
            if run > best_count:
                best_count = run
                best = votes[j]
        out[i] = best


def propagate_tree_labels(
    raw: LabeledCloud, seeds: LabeledCloud, radius: float = 0.1, workers: Optional[int] = None
) -> LabeledCloud:
    """Assign each unlabeled raw point the most frequent seed tree id within ``radius``.

    Raw points that already carry a label are left untouched, as are points
    without any seed in range.

    Args:
        raw: Cloud to label; usually entirely unlabeled.
        seeds: Points carrying tree ids only.
        radius: Closed-ball vote radius in meters.
        workers: Worker threads; defaults to ``FORESTSEG_THREADS`` or 1.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if len(seeds) == 0:
        raise ValueError("no seed points to propagate")
    if (seeds.labels < 1).any():
        raise ValueError("seed cloud must contain only tree-labeled points")
    index = SpatialIndex(seeds.points, radius)
    seed_labels = seeds.labels[index.order]
    out = raw.labels.copy()
    active = raw.labels == UNLABELED
    run_chunked(
        _majority_kernel,
        len(raw),
        workers,
        raw.points,
        active,
        float(radius),
        index.sorted_points,
        seed_labels,
        index.keys,
        index.starts,
        index.origin,
        index.dims,
        index.cell_size,
        _slice_buffer(radius, radius),
        out,
    )
    logger.info("propagated tree ids to %d of %d unlabeled points", int((out[active] >= 1).sum()), int(active.sum()))
    return raw.with_labels(out)


# step 2


@numba.njit(cache=True, nogil=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True, nogil=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return
    if ra < rb:
        parent[rb] = ra
    else:
        parent[ra] = rb


@numba.njit(cache=True, nogil=True)
def _link_kernel(points, r, spoints, order, keys, starts, origin, dims, cell_size, slices, parent):
    r2 = r * r
    for i in range(points.shape[0]):
        q = points[i]
        n = _column_slices(q, r, keys, starts, origin, dims, cell_size, slices)
        for s in range(n):
            for k in range(slices[s, 0], slices[s, 1]):
                j = order[k]
                if j <= i:
                    continue
                dx = spoints[k, 0] - q[0]
                dy = spoints[k, 1] - q[1]
                dz = spoints[k, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    _union(parent, i, j)


@numba.njit(cache=True, nogil=True)
def _flatten(parent):
    for i in range(parent.shape[0]):
        parent[i] = _find(parent, i)


def connected_components(points: npt.ArrayLike, radius: float) -> npt.NDArray[np.int64]:
    """Label connected components of the graph linking points within ``radius``.

    Each point's component label is the smallest point index in its component.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    parent = np.arange(len(points), dtype=np.int64)
    if len(points) == 0:
        return parent
    index = SpatialIndex(points, radius)
    _link_kernel(
        points,
        float(radius),
        index.sorted_points,
        index.order,
        index.keys,
        index.starts,
        index.origin,
        index.dims,
        index.cell_size,
        _slice_buffer(radius, radius),
        parent,
    )
    _flatten(parent)
    return parent


def extract_non_tree(cloud: LabeledCloud, linkage_radius: float = 0.3) -> LabeledCloud:
    """Relabel the largest connected component of unlabeled points as non-tree.

    Only unlabeled points take part in the linkage. Equal-sized components are
    resolved in favor of the one holding the smallest point index. Emits
    :class:`NoUnlabeledPointsWarning` and returns the cloud unchanged when
    nothing is unlabeled.
    """
    if not linkage_radius > 0:
        raise ValueError(f"linkage_radius must be positive, got {linkage_radius}")
    candidates = np.flatnonzero(cloud.labels == UNLABELED)
    if len(candidates) == 0:
        warnings.warn("no unlabeled points; non-tree extraction skipped", NoUnlabeledPointsWarning, stacklevel=2)
        return cloud
    roots = connected_components(cloud.points[candidates], linkage_radius)
    sizes = np.bincount(roots, minlength=len(candidates))
    # Roots are the smallest member index, so argmax picks the tie-break winner.
    largest = int(np.argmax(sizes))
    labels = cloud.labels.copy()
    labels[candidates[roots == largest]] = NON_TREE
    logger.info("non-tree component: %d of %d unlabeled points", int(sizes[largest]), len(candidates))
    return cloud.with_labels(labels)


# step 3


def assign_non_annotated(cloud: LabeledCloud) -> LabeledCloud:
    """Mark every remaining unlabeled point as non-annotated."""
    labels = cloud.labels.copy()
    labels[labels == UNLABELED] = NON_ANNOTATED
    return cloud.with_labels(labels)


# tree height filter


def _small_tree_ids(cloud: LabeledCloud, min_height: float) -> npt.NDArray[np.int32]:
    if cloud.heights is None:
        raise ValueError("cloud has no heights; run ground_normalize first")
    tree = cloud.labels >= 1
    ids, inverse = np.unique(cloud.labels[tree], return_inverse=True)
    max_height = np.full(len(ids), -np.inf)
    np.maximum.at(max_height, inverse, cloud.heights[tree])
    return ids[max_height < min_height]


def filter_small_trees(cloud: LabeledCloud, min_height: float = 10.0) -> LabeledCloud:
    """Relabel as non-tree every tree whose maximum height is below ``min_height``.

    Trees reaching exactly ``min_height`` are kept.
    """
    small = _small_tree_ids(cloud, min_height)
    labels = cloud.labels.copy()
    labels[np.isin(labels, small)] = NON_TREE
    return cloud.with_labels(labels)


def propagate_full(
    raw: LabeledCloud,
    seeds: LabeledCloud,
    params: PropagationParams = PropagationParams(),
    workers: Optional[int] = None,
) -> tuple[LabeledCloud, PropagationSummary]:
    """Run ground normalization and all four labeling stages.

    Returns:
        The fully labeled cloud and a summary of per-class and per-tree counts.
    """
    cloud = LabeledCloud(raw.points, raw.labels, None, raw.meta)
    ground_normalize(cloud, params.ground_cell)
    cloud = propagate_tree_labels(cloud, seeds, params.propagate_radius, workers)
    if (cloud.labels == UNLABELED).any():
        cloud = extract_non_tree(cloud, params.linkage_radius)
    else:
        logger.warning("no unlabeled points left after propagation")
    cloud = assign_non_annotated(cloud)
    removed = _small_tree_ids(cloud, params.min_tree_height)
    cloud = filter_small_trees(cloud, params.min_tree_height)
    summary = PropagationSummary(
        class_counts=class_counts(cloud.labels),
        tree_counts=tree_counts(cloud.labels),
        params=params,
        removed_small_trees=[int(i) for i in removed],
    )
    return cloud, summary
