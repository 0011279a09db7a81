"""Random square training crops with a centered supervision region."""

from __future__ import annotations

__all__ = ["CropSpec", "Crop", "INNER_BIT", "SUPERVISED_BIT", "sample_crop", "export_crops"]

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt

from .cloud import NON_ANNOTATED, LabeledCloud
from .io import PathLike, save_cloud, save_mask
from .parallel import resolve_workers

logger = logging.getLogger(__name__)

INNER_BIT = 1
SUPERVISED_BIT = 2


@dataclass(frozen=True)
class CropSpec:
    crop_size: float = 35.0
    inner_size: float = 8.0
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if not self.inner_size > 0:
            raise ValueError(f"inner_size must be positive, got {self.inner_size}")
        if self.crop_size < self.inner_size:
            raise ValueError(f"crop_size {self.crop_size} is smaller than inner_size {self.inner_size}")
        if self.count < 1:
            raise ValueError(f"count must be at least 1, got {self.count}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Crop:
    cloud: LabeledCloud
    """Cropped points, re-centered so the crop center is at x = y = 0."""
    inner: npt.NDArray[np.bool_]
    supervised: npt.NDArray[np.bool_]
    """Inner points that are not non-annotated."""
    center: tuple[float, float]
    indices: npt.NDArray[np.int64]
    """Indices of the cropped points in the source cloud."""

    @property
    def flags(self) -> npt.NDArray[np.uint8]:
        return (self.inner * INNER_BIT + self.supervised * SUPERVISED_BIT).astype(np.uint8)


def _center(bounds, spec: CropSpec, index: int) -> tuple[float, float]:
    xmin, ymin, xmax, ymax = bounds
    half = spec.inner_size / 2
    if xmax - xmin < spec.inner_size or ymax - ymin < spec.inner_size:
        raise ValueError(
            f"cloud extent {xmax - xmin:.3f} x {ymax - ymin:.3f} m is smaller than the {spec.inner_size} m inner square"
        )
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, index])
    cx = rng.uniform(xmin + half, xmax - half)
    cy = rng.uniform(ymin + half, ymax - half)
    return float(cx), float(cy)


def sample_crop(cloud: LabeledCloud, spec: CropSpec, index: int) -> Crop:
    """Draw crop ``index`` of the sequence defined by ``spec.seed``.

    The crop center is uniform over positions that keep the whole inner square
    inside the cloud's 2D bounds, and depends only on ``(seed, index)``.
    """
    center = _center(cloud.xy_bounds, spec, index)
    offset = np.abs(cloud.points[:, :2] - center)
    indices = np.flatnonzero((offset <= spec.crop_size / 2).all(axis=1))
    inner = (offset[indices] <= spec.inner_size / 2).all(axis=1)
    supervised = inner & (cloud.labels[indices] != NON_ANNOTATED)
    points = cloud.points[indices] - np.array([center[0], center[1], 0.0])
    heights = None if cloud.heights is None else cloud.heights[indices]
    return Crop(LabeledCloud(points, cloud.labels[indices], heights, cloud.meta), inner, supervised, center, indices)


def export_crops(
    cloud: LabeledCloud, spec: CropSpec, out_dir: PathLike, workers: Optional[int] = None
) -> dict:
    """Write ``spec.count`` crops as packed-binary clouds with mask sidecars plus ``manifest.json``.

    Returns:
        The manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(spec.count - 1)))

    def write(index: int) -> dict:
        crop = sample_crop(cloud, spec, index)
        stem = f"crop_{index:0{width}d}"
        save_cloud(crop.cloud, out_dir / f"{stem}.fseg", "packed_binary")
        save_mask(out_dir / f"{stem}.fmsk", crop.flags)
        return {
            "index": index,
            "cloud": f"{stem}.fseg",
            "mask": f"{stem}.fmsk",
            "center": list(crop.center),
            "n_points": int(len(crop.cloud)),
            "n_inner": int(crop.inner.sum()),
            "n_supervised": int(crop.supervised.sum()),
        }

    workers = resolve_workers(workers)
    if workers == 1:
        entries = [write(i) for i in range(spec.count)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(write, range(spec.count)))

    manifest = {"seed": spec.seed, "spec": spec.to_dict(), "crops": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("wrote %d crops to %s", spec.count, out_dir)
    return manifest
