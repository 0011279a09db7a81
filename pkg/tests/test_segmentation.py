import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestseg.segmentation import (
    ClusterParams,
    PredictionSet,
    apply_offsets,
    assign_remaining,
    density_cluster,
    renumber_by_first_index,
    segment,
    semantic_classify,
)
from forestseg.synthetic import oracle_predictions
from oracles import brute_dbscan, brute_nearest_assign, co_membership


def test_threshold_inclusive():
    pred = PredictionSet([0.5, 0.49, 1.0, 0.0], np.zeros((4, 3)))
    assert semantic_classify(pred, 0.5).tolist() == [True, False, True, False]


def test_all_zero_scores():
    pred = PredictionSet(np.zeros(10), np.zeros((10, 3)))
    assert not semantic_classify(pred).any()


def test_classify_matches_elementwise():
    rng = np.random.default_rng(0)
    score = rng.uniform(0, 1, 1000)
    pred = PredictionSet(score, np.zeros((1000, 3)))
    np.testing.assert_array_equal(semantic_classify(pred, 0.3), np.array([s >= 0.3 for s in score]))


def test_prediction_validation():
    with pytest.raises(ValueError):
        PredictionSet([1.2], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        PredictionSet([0.5, 0.5], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        PredictionSet([0.5], [[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        semantic_classify(PredictionSet([0.5], np.zeros((1, 3))), 1.0)


def test_zero_offsets_identity():
    rng = np.random.default_rng(1)
    points = rng.normal(size=(50, 3))
    shifted, idx = apply_offsets(points, np.zeros_like(points), np.ones(50, bool))
    np.testing.assert_array_equal(shifted, points)
    np.testing.assert_array_equal(idx, np.arange(50))


def test_offsets_collapse_to_base(small_forest):
    pred = oracle_predictions(small_forest)
    shifted, idx = apply_offsets(small_forest.cloud.points, pred.offset, pred.semantic_score > 0)
    labels = small_forest.cloud.labels[idx]
    np.testing.assert_allclose(shifted, small_forest.bases[labels - 1], atol=1e-12)


def test_apply_offsets_vector_addition():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(200, 3))
    offsets = rng.normal(size=(200, 3))
    mask = rng.uniform(size=200) < 0.4
    shifted, idx = apply_offsets(points, offsets, mask)
    for row, i in enumerate(idx):
        assert mask[i]
        np.testing.assert_array_equal(shifted[row], [points[i][a] + offsets[i][a] for a in range(3)])
    assert len(idx) == mask.sum()


def two_blobs(rng, n=200, radius=0.2, gap=5.0):
    def ball(center):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + d * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3)

    return np.vstack([ball(np.zeros(3)), ball(np.array([gap, 0, 0]))])


def test_two_blobs():
    ids = density_cluster(two_blobs(np.random.default_rng(3)), ClusterParams(eps=0.6, min_pts=100))
    assert ids[:200].tolist() == [1] * 200
    assert ids[200:].tolist() == [2] * 200


def test_too_few_points_all_noise():
    points = np.random.default_rng(4).uniform(0, 0.1, size=(50, 3))
    assert (density_cluster(points, ClusterParams(min_pts=100)) == 0).all()


def test_border_point_joins_lowest_index_core():
    # Index 0 is a border point within eps of the cores at index 1 (cluster A) and 6 (cluster B).
    a = [[-0.5, 0, 0]] + [[-0.9, 0, 0]] * 4
    b = [[0.5, 0, 0]] + [[0.9, 0, 0]] * 4
    points = np.array([[0, 0, 0]] + a + b, dtype=float)
    ids = density_cluster(points, ClusterParams(eps=0.5, min_pts=5))
    assert ids.tolist() == [1] * 6 + [2] * 5
    np.testing.assert_array_equal(ids, brute_dbscan(points, 0.5, 5))


def random_dbscan_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(100, 1000))
    centers = rng.uniform(0, 6, size=(int(rng.integers(2, 8)), 3))
    members = centers[rng.integers(0, len(centers), size=n)] + rng.normal(0, 0.3, size=(n, 3))
    return members, float(rng.uniform(0.2, 0.6)), int(rng.integers(3, 25))


@pytest.mark.parametrize("seed", range(8))
def test_dbscan_matches_quadratic_oracle(seed):
    points, eps, min_pts = random_dbscan_case(seed)
    ids = density_cluster(points, ClusterParams(eps=eps, min_pts=min_pts))
    np.testing.assert_array_equal(ids, brute_dbscan(points, eps, min_pts))


def test_dbscan_permutation_invariant_core_membership():
    points, eps, min_pts = random_dbscan_case(11)
    ids = density_cluster(points, ClusterParams(eps=eps, min_pts=min_pts))
    perm = np.random.default_rng(0).permutation(len(points))
    permuted = density_cluster(points[perm], ClusterParams(eps=eps, min_pts=min_pts))
    core = (np.sum(
        ((points[:, None] - points[None]) ** 2).sum(-1) <= eps * eps, axis=1
    ) >= min_pts)
    back = np.empty_like(permuted)
    back[perm] = permuted
    np.testing.assert_array_equal(co_membership(ids)[np.ix_(core, core)], co_membership(back)[np.ix_(core, core)])


def test_dbscan_2d_option():
    points = np.array([[0, 0, 0], [0, 0, 10.0]])
    assert density_cluster(points, ClusterParams(eps=0.1, min_pts=2)).tolist() == [0, 0]
    assert density_cluster(points, ClusterParams(eps=0.1, min_pts=2, cluster_dims=2)).tolist() == [1, 1]


def test_oracle_offsets_recover_trees(small_forest):
    pred = oracle_predictions(small_forest)
    shifted, idx = apply_offsets(small_forest.cloud.points, pred.offset, pred.semantic_score >= 0.5)
    ids = density_cluster(shifted)
    truth = small_forest.cloud.labels[idx]
    np.testing.assert_array_equal(ids, renumber_by_first_index(truth))


def test_assign_near_noise():
    points = np.array([[0, 0, 0], [0.1, 0, 0], [10, 0, 0]], dtype=float)
    ids = assign_remaining(points, [1, 0, 0], 1.5)
    assert ids.tolist() == [1, 1, 0]


def test_assign_without_clusters_unchanged():
    assert assign_remaining(np.zeros((3, 3)), [0, 0, 0], 1.5).tolist() == [0, 0, 0]


@pytest.mark.parametrize("seed", range(4))
def test_assign_matches_nearest_oracle(seed):
    rng = np.random.default_rng(seed)
    points = rng.uniform(0, 8, size=(800, 3))
    points[:100] = np.round(points[:100])  # exact ties
    ids = np.where(rng.uniform(size=800) < 0.4, rng.integers(1, 5, size=800), 0)
    np.testing.assert_array_equal(assign_remaining(points, ids, 1.5), brute_nearest_assign(points, ids, 1.5))


def test_renumber():
    assert renumber_by_first_index([0, 7, 3, 7, -1, 3, 9]).tolist() == [0, 1, 2, 1, 0, 2, 3]


def test_segment_oracle(small_forest):
    ids = segment(small_forest.cloud.points, oracle_predictions(small_forest))
    np.testing.assert_array_equal(ids, renumber_by_first_index(small_forest.cloud.labels))


def test_segment_thread_independent(forest):
    pred = oracle_predictions(forest)
    np.testing.assert_array_equal(segment(forest.cloud.points, pred, workers=1), segment(forest.cloud.points, pred, workers=5))


def test_cluster_params_validation():
    for bad in (dict(eps=0), dict(min_pts=0), dict(assign_radius=-1), dict(semantic_threshold=0), dict(cluster_dims=4)):
        with pytest.raises(ValueError):
            ClusterParams(**bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_density_cluster_is_partition_matching_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 150))
    points = rng.uniform(0, 2, size=(n, 3))
    eps, min_pts = float(rng.uniform(0.1, 0.6)), int(rng.integers(1, 10))
    ids = density_cluster(points, ClusterParams(eps=eps, min_pts=min_pts))
    assert ids.shape == (n,) and (ids >= 0).all()
    np.testing.assert_array_equal(ids, brute_dbscan(points, eps, min_pts))
