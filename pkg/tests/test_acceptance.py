"""End-to-end acceptance criteria. Each test prints exactly one PASS/FAIL line."""

import hashlib
import json
import time

import numpy as np
import pytest

from forestseg.cloud import LabeledCloud, class_counts
from forestseg.crops import CropSpec, sample_crop
from forestseg.evaluation import evaluate, match_instances, per_tree_f1, semantic_accuracy
from forestseg.index import build_index, radius_query
from forestseg.propagation import extract_non_tree, propagate_full, propagate_tree_labels
from forestseg.segmentation import ClusterParams, density_cluster, segment, semantic_classify
from forestseg.synthetic import make_forest, noisy_predictions, oracle_predictions
from forestseg.tiling import plan_tiles, segment_tiled
from oracles import (
    brute_best_matching,
    brute_dbscan,
    brute_extract_non_tree,
    brute_majority,
    co_membership,
    iou_table,
)

pytestmark = pytest.mark.acceptance

THREAD_COUNTS = (1, 4, 16)


def fixture_forest():
    # 50 trees on a 5 m grid (>= 4.2 m apart after jitter), 250-500 points per tree,
    # ground sheet at 0.2 m spacing.
    return make_forest(n_trees=50, spacing=5.0, jitter=0.4, points_per_tree=(250, 500), seed=11)


def canonical(ids):
    """Relabel instances by first occurrence so equal partitions compare equal."""
    ids = np.asarray(ids)
    out = np.zeros(len(ids), dtype=np.int64)
    mapping = {}
    for i, v in enumerate(ids.tolist()):
        if v > 0:
            out[i] = mapping.setdefault(v, len(mapping) + 1)
    return out


def digest(array):
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


# Criterion payloads. Each returns a JSON-serializable report for a given worker count.


def end_to_end_report(noisy, workers):
    forest = fixture_forest()
    pred = noisy_predictions(forest, 0.1, 0.05, seed=5) if noisy else oracle_predictions(forest)
    params = ClusterParams()
    ids = segment_tiled(forest.cloud.points, pred, params, workers=workers)
    mask = semantic_classify(pred, params.semantic_threshold)
    return evaluate(forest.cloud, ids, mask)


def propagation_fixture(seed):
    rng = np.random.default_rng(1000 + seed)
    n_seeds = int(rng.integers(500, 3000))
    raw = rng.uniform(0, 2.5, size=(10_000, 3))
    raw[:1000] = np.round(raw[:1000], 1)
    seed_points = rng.uniform(0, 2.5, size=(n_seeds, 3))
    seed_points[: n_seeds // 4] = np.round(seed_points[: n_seeds // 4], 1)
    seed_labels = rng.integers(1, 8, size=n_seeds).astype(np.int32)
    return LabeledCloud(raw), LabeledCloud(seed_points, seed_labels)


def propagation_outputs(seed, workers):
    raw, seeds = propagation_fixture(seed)
    voted = propagate_tree_labels(raw, seeds, 0.1, workers)
    extracted = extract_non_tree(voted, 0.3)
    return raw, seeds, voted, extracted


def propagation_report(workers):
    out = []
    for seed in range(20):
        _, _, voted, extracted = propagation_outputs(seed, workers)
        out.append({"voted": digest(voted.labels), "extracted": digest(extracted.labels)})
    return out


def partition_report(workers):
    out = []
    for seed in range(20):
        raw, seeds = propagation_fixture(seed)
        cloud, summary = propagate_full(raw, seeds, workers=workers)
        out.append({"labels": digest(cloud.labels), "summary": summary.to_dict()})
    forest = make_forest(n_trees=9, seed=3)
    cloud, summary = propagate_full(forest.raw, forest.seeds(withheld=[4]), workers=workers)
    out.append({"labels": digest(cloud.labels), "summary": summary.to_dict()})
    return out


def dbscan_fixture(seed):
    rng = np.random.default_rng(2000 + seed)
    n = int(rng.integers(100, 1001))
    centers = rng.uniform(0, 6, size=(int(rng.integers(2, 8)), 3))
    points = centers[rng.integers(0, len(centers), size=n)] + rng.normal(0, 0.3, size=(n, 3))
    points[: n // 5] = np.round(points[: n // 5], 1)
    return points, float(rng.uniform(0.2, 0.6)), int(rng.integers(3, 25))


def dbscan_report(workers):
    out = []
    for seed in range(20):
        points, eps, min_pts = dbscan_fixture(seed)
        out.append(digest(density_cluster(points, ClusterParams(eps=eps, min_pts=min_pts), workers)))
    return out


def straddling_plan(forest, columns):
    """A plan whose first inner-box boundary passes exactly through a tree base."""
    xmin, ymin, xmax, ymax = forest.cloud.xy_bounds
    target = xmin + (xmax - xmin) / columns
    k = int(np.argmin(np.where(forest.bases[:, 0] >= target, forest.bases[:, 0] - target, np.inf)))
    inner = forest.bases[k, 0] - xmin
    return plan_tiles((xmin, ymin, xmax, ymax), inner + 8.0, inner), k + 1


def tiling_outputs(workers):
    forest = fixture_forest()
    pred = oracle_predictions(forest)
    untiled = segment(forest.cloud.points, pred, workers=workers)
    tiled = {}
    for columns in (2, 3):
        plan, tree = straddling_plan(forest, columns)
        tiled[columns] = (plan, tree, segment_tiled(forest.cloud.points, pred, plan=plan, workers=workers))
    return forest, untiled, tiled


def tiling_report(workers):
    _, untiled, tiled = tiling_outputs(workers)
    return {"untiled": digest(untiled), **{f"{c}x{c}": digest(ids) for c, (_, _, ids) in tiled.items()}}


def test_criterion_1_oracle_end_to_end(verdict):
    start = time.perf_counter()
    report = end_to_end_report(noisy=False, workers=1)
    elapsed = time.perf_counter() - start
    ok = (
        report.fp_predictions == 0
        and report.fn_trees == 0
        and report.semantic_accuracy == 1.0
        and report.mean_f1 == 1.0
        and len(report.per_tree_f1) == 50
        and elapsed < 30
    )
    verdict(1, ok, f"oracle pipeline: {report.summary()} ({elapsed:.1f} s)")


def test_criterion_2_noise_robustness(verdict):
    start = time.perf_counter()
    report = end_to_end_report(noisy=True, workers=1)
    elapsed = time.perf_counter() - start
    ok = report.mean_f1 >= 0.99 and report.fp_predictions + report.fn_trees <= 1 and elapsed < 30
    verdict(2, ok, f"offset noise 0.1 m, 5 % score flips: {report.summary()} ({elapsed:.1f} s)")


def test_criterion_3_propagation_oracles(verdict):
    start = time.perf_counter()
    mismatches = []
    for seed in range(20):
        raw, seeds, voted, extracted = propagation_outputs(seed, workers=1)
        expected_vote = brute_majority(raw.points, raw.labels, seeds.points, seeds.labels, 0.1)
        if not np.array_equal(voted.labels, expected_vote):
            mismatches.append(f"vote#{seed}")
        expected_extract = brute_extract_non_tree(raw.points, expected_vote, 0.3)
        if not np.array_equal(extracted.labels, expected_extract):
            mismatches.append(f"extract#{seed}")
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 60
    verdict(3, ok, f"20 fixtures of 10k points equal brute-force oracles, mismatches {mismatches or 'none'} ({elapsed:.1f} s)")


def test_criterion_4_partition(verdict):
    bad = []
    for k, entry in enumerate(partition_report(workers=1)):
        counts = entry["summary"]["class_counts"]
        n = 10_000 if k < 20 else len(make_forest(n_trees=9, seed=3).cloud)
        if counts["unlabeled"] != 0 or counts["tree"] + counts["non_tree"] + counts["non_annotated"] != n:
            bad.append(k)
    verdict(4, not bad, f"21 fixtures partition into tree/non-tree/non-annotated with no unlabeled points, violations {bad or 'none'}")


def test_criterion_5_dbscan_oracle(verdict):
    bad = []
    for seed in range(20):
        points, eps, min_pts = dbscan_fixture(seed)
        ids = density_cluster(points, ClusterParams(eps=eps, min_pts=min_pts))
        if not np.array_equal(co_membership(ids), co_membership(brute_dbscan(points, eps, min_pts))):
            bad.append(seed)
    verdict(5, not bad, f"20 instances of <= 1k points match the quadratic reference, mismatches {bad or 'none'}")


def test_criterion_6_tiling_consistency(verdict):
    forest, untiled, tiled = tiling_outputs(workers=1)
    details, ok = [], True
    for columns, (plan, tree, ids) in tiled.items():
        owners = np.unique(plan.inner_tile_of(forest.cloud.points[forest.cloud.labels == tree, :2]))
        straddles = len(owners) >= 2
        one_instance = len(np.unique(ids[forest.cloud.labels == tree])) == 1
        same = np.array_equal(canonical(ids), canonical(untiled))
        ok &= (plan.nx, plan.ny) == (columns, columns) and straddles and one_instance and same
        details.append(f"{columns}x{columns}: identical={same}, straddling tree {tree} one instance={one_instance}")
    verdict(6, ok, "; ".join(details))


def test_criterion_7_determinism(verdict):
    payloads = {
        "1": lambda w: end_to_end_report(False, w).to_json(),
        "2": lambda w: end_to_end_report(True, w).to_json(),
        "3": lambda w: json.dumps(propagation_report(w), sort_keys=True),
        "4": lambda w: json.dumps(partition_report(w), sort_keys=True),
        "5": lambda w: json.dumps(dbscan_report(w), sort_keys=True),
        "6": lambda w: json.dumps(tiling_report(w), sort_keys=True),
    }
    differing = []
    for name, make in payloads.items():
        outputs = {make(w).encode() for w in THREAD_COUNTS}
        if len(outputs) != 1:
            differing.append(name)
    verdict(7, not differing, f"reports of criteria 1-6 byte-identical at {THREAD_COUNTS} threads, differing {differing or 'none'}")


def test_criterion_8_metric_arithmetic(verdict):
    gt = np.concatenate([np.full(80, 1), np.full(20, 1), np.full(20, 0)])
    pred = np.concatenate([np.full(80, 5), np.full(20, 0), np.full(20, 5)])
    scores, _, _ = per_tree_f1(gt, pred, match_instances(gt, pred))
    f1 = round(scores[1], 4)
    acc_gt = np.concatenate([np.full(50, 1), np.full(50, 0)])
    acc_pred = acc_gt > 0
    acc_pred[0] = False
    accuracy = round(semantic_accuracy(acc_gt, acc_pred), 4)

    optimal = True
    for seed in range(40):
        rng = np.random.default_rng(3000 + seed)
        n_gt, n_pred = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        g = rng.integers(0, n_gt + 1, size=300)
        p = np.where(rng.uniform(size=300) < 0.7, (g * 3 + rng.integers(0, 2, size=300)) % (n_pred + 1),
                     rng.integers(0, n_pred + 1, size=300))
        m = match_instances(g, p, min_instance_points=1)
        gts, preds, table = iou_table(g, p)
        best, best_sets = brute_best_matching(gts, preds, table)
        optimal &= abs(sum(iou for _, _, iou in m.pairs) - best) <= 1e-12
        optimal &= frozenset((a, b) for a, b, _ in m.pairs) in best_sets
    ok = f1 == 0.8 and accuracy == 0.99 and optimal
    verdict(8, ok, f"F1 {f1:.4f}, accuracy {accuracy:.4f}, 40 grids up to 5x5 optimal={optimal}")


@pytest.mark.slow
def test_criterion_9_performance(verdict):
    forest = make_forest(n_trees=400, points_per_tree=(1000, 1500), ground_spacing=0.14, seed=1)
    rng = np.random.default_rng(0)
    trees = np.flatnonzero(forest.cloud.labels >= 1)
    pick = np.sort(rng.choice(trees, 100_000, replace=False))
    seeds = LabeledCloud(forest.cloud.points[pick], forest.cloud.labels[pick])
    n = len(forest.cloud)

    start = time.perf_counter()
    cloud, _ = propagate_full(forest.raw, seeds)
    propagation_time = time.perf_counter() - start

    index = build_index(forest.cloud.points, 0.1)
    queries = forest.cloud.points[rng.choice(n, 50_000, replace=False)]
    radius_query(index, queries[0], 0.1)
    start = time.perf_counter()
    for q in queries:
        radius_query(index, q, 0.1)
    rate = len(queries) / (time.perf_counter() - start)

    ok = n >= 1_000_000 and propagation_time < 60 and rate >= 1e5 and class_counts(cloud.labels)["unlabeled"] == 0
    verdict(9, ok, f"{n} points, 100000 seeds: propagate_full {propagation_time:.1f} s, radius_query {rate:,.0f} queries/s")


def test_criterion_10_crop_geometry(verdict):
    rng = np.random.default_rng(10)
    area = (120.0, 90.0)
    density = 30.0
    n = int(density * area[0] * area[1])
    cloud = LabeledCloud(np.column_stack([rng.uniform(0, area[0], n), rng.uniform(0, area[1], n), rng.uniform(0, 30, n)]))
    xmin, ymin, xmax, ymax = cloud.xy_bounds
    spec = CropSpec(crop_size=35.0, inner_size=8.0, seed=123)

    inside_bounds = within_square = True
    counts = []
    for index in range(1000):
        crop = sample_crop(cloud, spec, index)
        cx, cy = crop.center
        inside_bounds &= xmin <= cx - 4 and cx + 4 <= xmax and ymin <= cy - 4 and cy + 4 <= ymax
        source = cloud.points[crop.indices, :2]
        within_square &= bool((np.abs(source - crop.center) <= 17.5).all())
        counts.append(int(crop.inner.sum()))
    counts = np.array(counts)

    expected = n * 64.0 / ((xmax - xmin) * (ymax - ymin))
    sigma = np.sqrt(expected * (1 - 64.0 / ((xmax - xmin) * (ymax - ymin))))
    within = np.mean(np.abs(counts - expected) <= 3 * sigma)
    mean_ok = abs(counts.mean() - expected) <= 3 * sigma / np.sqrt(len(counts))
    ok = inside_bounds and within_square and within >= 0.99 and mean_ok
    verdict(
        10,
        ok,
        f"1000 crops: inner squares in bounds={inside_bounds}, points in 35 m square={within_square}, "
        f"inner count mean {counts.mean():.1f} vs expected {expected:.1f} (sigma {sigma:.1f}), "
        f"{100 * within:.1f} % of crops within 3 sigma",
    )
