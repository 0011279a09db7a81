"""Labeled point-cloud data model.

Labels are stored as a signed 32-bit integer channel using the same encoding
as the on-disk formats:

* ``>= 1``: tree instance id
* ``0``: non-tree (ground, understory)
* ``-1``: unlabeled
* ``-2``: non-annotated (tree points without an instance label)
"""

from __future__ import annotations

__all__ = [
    "NON_TREE",
    "UNLABELED",
    "NON_ANNOTATED",
    "DatasetMeta",
    "LabeledCloud",
    "KNOWN_DATASETS",
    "class_counts",
    "tree_counts",
]

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import numpy.typing as npt

NON_TREE = 0
UNLABELED = -1
NON_ANNOTATED = -2

_VALID_SPECIAL = (NON_TREE, UNLABELED, NON_ANNOTATED)


@dataclass(frozen=True)
class DatasetMeta:
    """Descriptive metadata of a forest point-cloud dataset."""

    name: str = ""
    country: str = ""
    n_plots: int = 0
    n_trees: int = 0
    annotated_area_ha: float = 0.0
    forest_type: str = ""
    sensor: str = ""
    n_trees_min_height: Optional[int] = None
    """Number of trees reaching the minimum tree height (10 m), when known."""

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError(f"n_trees must be non-negative, got {self.n_trees}")
        if self.annotated_area_ha < 0:
            raise ValueError(f"annotated_area_ha must be non-negative, got {self.annotated_area_ha}")

    def to_dict(self) -> dict:
        return asdict(self)


KNOWN_DATASETS: Dict[str, DatasetMeta] = {
    meta.name: meta
    for meta in (
        DatasetMeta("L1W", "Germany", 1, 200, 1.16, "temperate deciduous forest", "ZEB-Horizon", 200),
        DatasetMeta("NIBIO", "Norway", 20, 575, 1.21, "coniferous dominated boreal forest", "Riegl miniVUX-1 UAV", 482),
        DatasetMeta("CULS", "Czech Republic", 3, 47, 0.33, "coniferous dominated temperate forest", "Riegl VUX-1 UAV", 47),
        DatasetMeta("TU_WIEN", "Austria", 1, 150, 0.55, "deciduous dominated alluvial forest", "Riegl VUX-1 UAV", 106),
        DatasetMeta(
            "SCION", "New Zealand", 5, 135, 0.33, "non-native pure coniferous temperate forest", "Riegl MiniVUX-1 UAV", 130
        ),
        DatasetMeta("RMIT", "Australia", 1, 223, 0.37, "Native dry sclerophyll eucalypt forest", "Riegl MiniVUX-1 UAV", 92),
        DatasetMeta("LAUTX", "Austria", 6, 514, 0.83, "temperate mixed forest", "ZEB-Horizon", 354),
        DatasetMeta("WYTHAM", "England", 1, 877, 1.52, "temperate deciduous forest", "RIEGL VZ-400", 608),
    )
}


@dataclass
class LabeledCloud:
    """Points with a per-point label channel and optional heights above ground.

    Args:
        points: Coordinates of shape ``(n, 3)``, stored as float64.
        labels: Label codes of shape ``(n,)``, stored as int32.
        heights: Optional height above ground per point, shape ``(n,)``.
        meta: Dataset metadata.
    """

    points: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int32] = None  # type: ignore[assignment]
    heights: Optional[npt.NDArray[np.float64]] = None
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {points.shape}")
        if not np.isfinite(points).all():
            bad = int(np.flatnonzero(~np.isfinite(points).all(axis=1))[0])
            raise ValueError(f"non-finite coordinate at point {bad}")
        self.points = np.ascontiguousarray(points)

        if self.labels is None:
            labels = np.full(len(points), UNLABELED, dtype=np.int32)
        else:
            labels = np.ascontiguousarray(self.labels, dtype=np.int32).reshape(-1)
        if len(labels) != len(points):
            raise ValueError(f"label count {len(labels)} does not match point count {len(points)}")
        if (labels < NON_ANNOTATED).any():
            raise ValueError(f"invalid label code {int(labels.min())}")
        self.labels = labels

        if self.heights is not None:
            heights = np.ascontiguousarray(self.heights, dtype=np.float64).reshape(-1)
            if len(heights) != len(points):
                raise ValueError(f"height count {len(heights)} does not match point count {len(points)}")
            self.heights = heights

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy_bounds(self) -> tuple[float, float, float, float]:
        """2D bounding box ``(xmin, ymin, xmax, ymax)``."""
        if len(self) == 0:
            raise ValueError("empty cloud has no bounds")
        lo = self.points[:, :2].min(axis=0)
        hi = self.points[:, :2].max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def tree_ids(self) -> npt.NDArray[np.int32]:
        return np.unique(self.labels[self.labels >= 1])

    def with_labels(self, labels: npt.ArrayLike) -> "LabeledCloud":
        return replace(self, labels=np.asarray(labels, dtype=np.int32))

    def subset(self, indices: npt.ArrayLike) -> "LabeledCloud":
        indices = np.asarray(indices)
        heights = None if self.heights is None else self.heights[indices]
        return LabeledCloud(self.points[indices], self.labels[indices], heights, self.meta)


def class_counts(labels: npt.NDArray[np.int32]) -> Dict[str, int]:
    """Point counts per label class."""
    return {
        "tree": int((labels >= 1).sum()),
        "non_tree": int((labels == NON_TREE).sum()),
        "non_annotated": int((labels == NON_ANNOTATED).sum()),
        "unlabeled": int((labels == UNLABELED).sum()),
    }


def tree_counts(labels: npt.NDArray[np.int32]) -> Dict[int, int]:
    """Point count per tree id, in ascending id order."""
    ids, counts = np.unique(labels[labels >= 1], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}
