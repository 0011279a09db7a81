"""Label propagation, offset-based tree instance grouping and evaluation for forest point clouds."""

__version__ = "0.1.0"

from .cloud import NON_ANNOTATED, NON_TREE, UNLABELED, DatasetMeta, LabeledCloud
from .crops import CropSpec, export_crops, sample_crop
from .evaluation import evaluate, match_instances
from .ground import ground_normalize
from .index import SpatialIndex, build_index, radius_query, radius_query_many
from .io import load_cloud, load_predictions, save_cloud, save_predictions
from .propagation import PropagationParams, propagate_full
from .segmentation import ClusterParams, PredictionSet, density_cluster, segment
from .synthetic import make_forest, noisy_predictions, oracle_predictions
from .tiling import TilePlan, plan_tiles, segment_tiled

__all__ = [
    "NON_ANNOTATED",
    "NON_TREE",
    "UNLABELED",
    "ClusterParams",
    "CropSpec",
    "DatasetMeta",
    "LabeledCloud",
    "PredictionSet",
    "PropagationParams",
    "SpatialIndex",
    "TilePlan",
    "build_index",
    "density_cluster",
    "evaluate",
    "export_crops",
    "ground_normalize",
    "load_cloud",
    "load_predictions",
    "make_forest",
    "match_instances",
    "noisy_predictions",
    "oracle_predictions",
    "plan_tiles",
    "propagate_full",
    "radius_query",
    "radius_query_many",
    "sample_crop",
    "save_cloud",
    "save_predictions",
    "segment",
    "segment_tiled",
]
