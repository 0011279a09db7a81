"""Synthetic forest plots with known ground truth.

Each tree is a vertical stem topped by a spherical crown. Stems start
``base_gap`` above a dense, connected ground sheet so that trees and ground are
never linked at the default 0.3 m linkage radius. The tree base, the target of
oracle offsets, is the lowest stem point.
"""

from __future__ import annotations

__all__ = ["SyntheticForest", "make_forest", "oracle_predictions", "noisy_predictions"]

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

from .cloud import NON_TREE, LabeledCloud
from .segmentation import PredictionSet


@dataclass
class SyntheticForest:
    cloud: LabeledCloud
    """Complete cloud with ground-truth labels (tree ids and non-tree)."""
    bases: npt.NDArray[np.float64]
    """Base of tree ``k + 1`` at row ``k``."""
    heights: npt.NDArray[np.float64]

    @property
    def raw(self) -> LabeledCloud:
        """The cloud with every label removed."""
        return LabeledCloud(self.cloud.points, None, None, self.cloud.meta)

    def seeds(self, withheld: Sequence[int] = ()) -> LabeledCloud:
        """Tree-labeled points, optionally dropping whole trees."""
        keep = (self.cloud.labels >= 1) & ~np.isin(self.cloud.labels, list(withheld))
        return LabeledCloud(self.cloud.points[keep], self.cloud.labels[keep])

    def base_of_points(self) -> npt.NDArray[np.float64]:
        """Base of each point's tree; non-tree points map to themselves."""
        labels = self.cloud.labels
        target = self.cloud.points.copy()
        tree = labels >= 1
        target[tree] = self.bases[labels[tree] - 1]
        return target


def make_forest(
    n_trees: int = 50,
    spacing: float = 5.0,
    jitter: float = 0.4,
    crown_radius: float = 1.5,
    points_per_tree: tuple[int, int] = (250, 500),
    tree_heights: Optional[Sequence[float]] = None,
    height_range: tuple[float, float] = (12.0, 25.0),
    ground_spacing: float = 0.2,
    base_gap: float = 0.5,
    slope: tuple[float, float] = (0.0, 0.0),
    seed: int = 0,
) -> SyntheticForest:
    """Generate a plot of ``n_trees`` trees on a jittered grid above a ground sheet.

    Args:
        n_trees: Number of trees; ids are ``1..n_trees``.
        spacing: Grid spacing of tree bases in meters.
        jitter: Maximum per-axis displacement of a base from its grid node.
        crown_radius: Crown sphere radius in meters.
        points_per_tree: Inclusive range of points drawn per tree.
        tree_heights: Explicit tree heights; overrides ``height_range``.
        height_range: Uniform range of tree heights above ground.
        ground_spacing: Ground grid spacing; ground jitter is a tenth of it.
        base_gap: Vertical gap between the ground and the lowest stem point.
        slope: Terrain gradient ``(dz/dx, dz/dy)``.
        seed: Random seed.
    """
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(n_trees))
    rows = math.ceil(n_trees / cols)
    grid = np.array([(c * spacing, r * spacing) for r in range(rows) for c in range(cols)][:n_trees], dtype=float)
    xy_bases = grid + rng.uniform(-jitter, jitter, size=grid.shape)

    def terrain(x, y):
        return slope[0] * x + slope[1] * y

    if tree_heights is None:
        heights = rng.uniform(height_range[0], height_range[1], size=n_trees)
    else:
        heights = np.asarray(tree_heights, dtype=float)
        if len(heights) != n_trees:
            raise ValueError(f"got {len(heights)} tree heights for {n_trees} trees")

    parts, labels, bases = [], [], []
    for k in range(n_trees):
        bx, by = xy_bases[k]
        ground_z = terrain(bx, by)
        bottom = ground_z + base_gap
        top = ground_z + heights[k]
        n = int(rng.integers(points_per_tree[0], points_per_tree[1] + 1))
        radius = min(crown_radius, max((top - bottom) / 2, 0.1))
        n_stem = n // 2
        n_crown = n - n_stem - 2
        stem_z = rng.uniform(bottom, top - radius, size=n_stem)
        angle = rng.uniform(0, 2 * np.pi, size=n_stem)
        stem = np.column_stack([bx + 0.1 * np.cos(angle), by + 0.1 * np.sin(angle), stem_z])
        direction = rng.normal(size=(n_crown, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        reach = radius * rng.uniform(0, 1, size=(n_crown, 1)) ** (1 / 3)
        crown = np.array([bx, by, top - radius]) + direction * reach
        crown[:, 2] = np.minimum(crown[:, 2], top)
        base = np.array([bx, by, bottom])
        tip = np.array([bx, by, top])
        parts.append(np.vstack([base, stem, crown, tip]))
        labels.append(np.full(n, k + 1, dtype=np.int32))
        bases.append(base)

    lo = xy_bases.min(axis=0) - spacing / 2
    hi = xy_bases.max(axis=0) + spacing / 2
    gx = np.arange(lo[0], hi[0] + 1e-9, ground_spacing)
    gy = np.arange(lo[1], hi[1] + 1e-9, ground_spacing)
    mesh = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
    mesh = mesh + rng.uniform(-ground_spacing / 10, ground_spacing / 10, size=mesh.shape)
    ground = np.column_stack([mesh, terrain(mesh[:, 0], mesh[:, 1]) + rng.uniform(-0.01, 0.01, size=len(mesh))])

    points = np.vstack(parts + [ground])
    all_labels = np.concatenate(labels + [np.full(len(ground), NON_TREE, dtype=np.int32)])
    # Interleave trees and ground so that point order carries no structure.
    order = rng.permutation(len(points))
    cloud = LabeledCloud(points[order], all_labels[order])
    return SyntheticForest(cloud, np.array(bases), heights)


def oracle_predictions(forest: SyntheticForest) -> PredictionSet:
    """Scores of 1 on tree points and 0 elsewhere; offsets pointing exactly to the tree base."""
    tree = forest.cloud.labels >= 1
    offset = forest.base_of_points() - forest.cloud.points
    return PredictionSet(tree.astype(np.float64), offset)


def noisy_predictions(
    forest: SyntheticForest, offset_sigma: float = 0.1, flip_fraction: float = 0.05, seed: int = 0
) -> PredictionSet:
    """Oracle predictions with Gaussian offset noise and a random fraction of flipped scores.

    A flipped score becomes ``1 - score``.
    """
    rng = np.random.default_rng(seed)
    oracle = oracle_predictions(forest)
    offset = oracle.offset + rng.normal(0.0, offset_sigma, size=oracle.offset.shape)
    score = oracle.semantic_score.copy()
    n_flip = int(round(flip_fraction * len(score)))
    flipped = rng.choice(len(score), size=n_flip, replace=False)
    score[flipped] = 1.0 - score[flipped]
    return PredictionSet(score, offset)
