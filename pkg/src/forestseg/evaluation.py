"""Detection, semantic and instance metrics for tree segmentation.

Ground-truth trees are the positive labels of the reference cloud. Points
with a negative reference label (non-annotated, unlabeled) are excluded from
every metric. Predicted instances are matched one-to-one to ground-truth trees
by maximizing the summed IoU; predicted instances smaller than
``min_instance_points`` are ignored entirely.
"""

from __future__ import annotations

__all__ = [
    "InstanceMatching",
    "EvaluationReport",
    "match_instances",
    "detection_metrics",
    "semantic_accuracy",
    "per_tree_f1",
    "evaluate",
]

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import numpy.typing as npt
from scipy.optimize import linear_sum_assignment

from .cloud import LabeledCloud

DEFAULT_MIN_INSTANCE_POINTS = 50


@dataclass
class InstanceMatching:
    pairs: List[Tuple[int, int, float]]
    """``(gt_tree_id, pred_instance_id, iou)`` for every matched pair, by ascending gt id."""
    unmatched_gt: Set[int] = field(default_factory=set)
    unmatched_pred: Set[int] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "pairs": [{"gt": g, "pred": p, "iou": iou} for g, p, iou in self.pairs],
            "unmatched_gt": sorted(self.unmatched_gt),
            "unmatched_pred": sorted(self.unmatched_pred),
        }


@dataclass
class EvaluationReport:
    fp_predictions: int
    fn_trees: int
    semantic_accuracy: float
    per_tree_f1: Dict[int, float]
    mean_f1: float
    mean_f1_matched_only: float
    matching: InstanceMatching
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fp_predictions": self.fp_predictions,
            "fn_trees": self.fn_trees,
            "semantic_accuracy": self.semantic_accuracy,
            "per_tree_f1": {str(k): v for k, v in sorted(self.per_tree_f1.items())},
            "mean_f1": self.mean_f1,
            "mean_f1_matched_only": self.mean_f1_matched_only,
            "matching": self.matching.to_dict(),
            "params": self.params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        """Table-style one-line summary with percentages at two decimals."""
        return (
            f"Accuracy {100 * self.semantic_accuracy:.2f} | FP predictions {self.fp_predictions} | "
            f"FN trees {self.fn_trees} | F1 {100 * self.mean_f1:.2f}"
        )


def _evaluable(gt: npt.ArrayLike, pred: npt.ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    if len(gt) != len(pred):
        raise ValueError(f"ground truth has {len(gt)} points but prediction has {len(pred)}")
    keep = gt >= 0
    return gt[keep].astype(np.int64), pred[keep].astype(np.int64)


def _instances(
    gt: np.ndarray, pred: np.ndarray, min_instance_points: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    gt_ids, gt_sizes = np.unique(gt[gt >= 1], return_counts=True)
    pred_ids, pred_sizes = np.unique(pred[pred >= 1], return_counts=True)
    big = pred_sizes >= min_instance_points
    return gt_ids, gt_sizes, pred_ids[big], pred_sizes[big]


def _intersections(gt: np.ndarray, pred: np.ndarray, gt_ids: np.ndarray, pred_ids: np.ndarray) -> np.ndarray:
    inter = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    both = np.isin(gt, gt_ids) & np.isin(pred, pred_ids)
    if both.any():
        rows = np.searchsorted(gt_ids, gt[both])
        cols = np.searchsorted(pred_ids, pred[both])
        np.add.at(inter, (rows, cols), 1)
    return inter


def match_instances(
    gt: npt.ArrayLike, pred: npt.ArrayLike, min_instance_points: int = DEFAULT_MIN_INSTANCE_POINTS
) -> InstanceMatching:
    """One-to-one matching of ground-truth trees and predicted instances maximizing total IoU.

    Args:
        gt: Reference label per point.
        pred: Predicted instance id per point; ids below 1 mean no instance.
        min_instance_points: Predicted instances with fewer evaluable points are ignored.
    """
    gt, pred = _evaluable(gt, pred)
    gt_ids, gt_sizes, pred_ids, pred_sizes = _instances(gt, pred, min_instance_points)
    inter = _intersections(gt, pred, gt_ids, pred_ids)
    union = gt_sizes[:, None] + pred_sizes[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)

    pairs = []
    if iou.size:
        rows, cols = linear_sum_assignment(iou, maximize=True)
        pairs = [(int(gt_ids[r]), int(pred_ids[c]), float(iou[r, c])) for r, c in zip(rows, cols) if iou[r, c] > 0]
    pairs.sort()
    matched_gt = {g for g, _, _ in pairs}
    matched_pred = {p for _, p, _ in pairs}
    return InstanceMatching(
        pairs,
        {int(g) for g in gt_ids} - matched_gt,
        {int(p) for p in pred_ids} - matched_pred,
    )


def detection_metrics(matching: InstanceMatching) -> Tuple[int, int]:
    """``(false positive predictions, false negative trees)``."""
    return len(matching.unmatched_pred), len(matching.unmatched_gt)


def semantic_accuracy(gt_labels: npt.ArrayLike, pred_mask: npt.ArrayLike) -> float:
    """Fraction of evaluable points whose tree/non-tree class is predicted correctly."""
    gt, pred = _evaluable(gt_labels, np.asarray(pred_mask).astype(np.int64))
    if len(gt) == 0:
        raise ValueError("no evaluable points for semantic accuracy")
    return float(np.count_nonzero((gt >= 1) == (pred != 0)) / len(gt))


def per_tree_f1(
    gt: npt.ArrayLike, pred: npt.ArrayLike, matching: InstanceMatching
) -> Tuple[Dict[int, float], float, float]:
    """Point-level F1 of every ground-truth tree against its matched instance.

    Unmatched trees score 0.

    Returns:
        ``(f1 per tree id, mean over all trees, mean over matched trees)``.
    """
    gt, pred = _evaluable(gt, pred)
    gt_ids, gt_sizes = np.unique(gt[gt >= 1], return_counts=True)
    pred_ids, pred_sizes = np.unique(pred[pred >= 1], return_counts=True)
    scores = {int(g): 0.0 for g in gt_ids}
    gt_size = dict(zip(gt_ids.tolist(), gt_sizes.tolist()))
    pred_size = dict(zip(pred_ids.tolist(), pred_sizes.tolist()))
    matched = []
    for g, p, _ in matching.pairs:
        tp = int(np.count_nonzero((gt == g) & (pred == p)))
        fp = pred_size[p] - tp
        fn = gt_size[g] - tp
        scores[g] = 2 * tp / (2 * tp + fp + fn)
        matched.append(scores[g])
    mean_all = float(np.mean(list(scores.values()))) if scores else 0.0
    mean_matched = float(np.mean(matched)) if matched else 0.0
    return scores, mean_all, mean_matched


def evaluate(
    gt_cloud: LabeledCloud,
    pred_instances: npt.ArrayLike,
    pred_mask: Optional[npt.ArrayLike] = None,
    min_instance_points: int = DEFAULT_MIN_INSTANCE_POINTS,
    params: Optional[dict] = None,
) -> EvaluationReport:
    """Full protocol: matching, detection counts, semantic accuracy and per-tree F1.

    Args:
        gt_cloud: Reference cloud.
        pred_instances: Predicted instance id per point.
        pred_mask: Predicted tree mask; defaults to ``pred_instances > 0``.
        min_instance_points: Smallest predicted instance that counts.
        params: Extra parameters to echo into the report.
    """
    pred_instances = np.asarray(pred_instances)
    if pred_mask is None:
        pred_mask = pred_instances > 0
    matching = match_instances(gt_cloud.labels, pred_instances, min_instance_points)
    fp, fn = detection_metrics(matching)
    scores, mean_all, mean_matched = per_tree_f1(gt_cloud.labels, pred_instances, matching)
    echo = {"min_instance_points": min_instance_points}
    echo.update(params or {})
    return EvaluationReport(
        fp_predictions=fp,
        fn_trees=fn,
        semantic_accuracy=semantic_accuracy(gt_cloud.labels, pred_mask),
        per_tree_f1=scores,
        mean_f1=mean_all,
        mean_f1_matched_only=mean_matched,
        matching=matching,
        params=echo,
    )
