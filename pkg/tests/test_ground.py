import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestseg.cloud import LabeledCloud
from forestseg.ground import ground_grid, ground_normalize


def plane_with_stem(shift=0.0, slope=(0.0, 0.0), seed=0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 20, size=(20_000, 2))
    ground = np.column_stack([xy, slope[0] * xy[:, 0] + slope[1] * xy[:, 1]])
    stem_z = np.linspace(0.5, 12.0, 200)
    stem = np.column_stack([np.full(200, 10.3), np.full(200, 9.7), stem_z + slope[0] * 10.3 + slope[1] * 9.7])
    points = np.vstack([ground, stem])
    points[:, 2] += shift
    return LabeledCloud(points)


def test_flat_terrain_stem_top():
    cloud = plane_with_stem()
    heights = ground_normalize(cloud)
    assert heights[-1] == pytest.approx(12.0, abs=1e-9)
    assert cloud.heights is heights


def test_translation_invariance():
    a = ground_normalize(plane_with_stem())
    b = ground_normalize(plane_with_stem(shift=50.0))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_inclined_plane_against_analytic_ground():
    slope = (0.04, 0.03)
    cloud = plane_with_stem(slope=slope, seed=1)
    heights = ground_normalize(cloud, 2.0)
    pts = cloud.points
    truth = pts[:, 2] - (slope[0] * pts[:, 0] + slope[1] * pts[:, 1])
    assert np.abs(heights - truth).max() < 0.2


def test_empty_cells_filled_from_nearest():
    points = np.array([[0.5, 0.5, 1.0], [0.6, 0.4, 1.0], [9.5, 0.5, 5.0]])
    grid, _ = ground_grid(points, 1.0)
    assert grid.shape == (10, 1)
    assert grid[1, 0] == pytest.approx(1.0)
    assert grid[8, 0] == pytest.approx(5.0)
    assert not np.isnan(grid).any()


def test_percentile_within_cell():
    z = np.arange(101, dtype=float)
    points = np.column_stack([np.full(101, 0.5), np.full(101, 0.5), z])
    grid, _ = ground_grid(points, 2.0)
    assert grid[0, 0] == pytest.approx(np.percentile(z, 5))


def test_errors():
    with pytest.raises(ValueError):
        ground_normalize(LabeledCloud(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        ground_normalize(LabeledCloud(np.zeros((2, 3))), grid_cell=0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1000, 1000), st.integers(0, 100))
def test_z_translation_property(shift, seed):
    rng = np.random.default_rng(seed)
    points = rng.uniform(0, 10, size=(300, 3))
    moved = points + [0, 0, shift]
    a = ground_normalize(LabeledCloud(points))
    b = ground_normalize(LabeledCloud(moved))
    np.testing.assert_allclose(a, b, atol=1e-9 * (1 + abs(shift)))
