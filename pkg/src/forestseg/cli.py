"""Command-line entry point.

Exit codes: 0 on success, 1 on invalid arguments or input data, 2 on I/O
failures. Parameters resolve as command-line flag, then config file, then
built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .cloud import LabeledCloud, class_counts
from .crops import CropSpec, export_crops
from .evaluation import DEFAULT_MIN_INSTANCE_POINTS, evaluate
from .io import load_cloud, load_mask, load_predictions, save_cloud, save_mask, save_predictions
from .parallel import ENV_THREADS, default_workers
from .propagation import PropagationParams, propagate_full
from .segmentation import ClusterParams, semantic_classify
from .synthetic import make_forest, noisy_predictions, oracle_predictions
from .tiling import plan_for_cloud, segment_tiled

logger = logging.getLogger("forestseg")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2

# Defaults live here rather than in argparse so that config values can sit in between.
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "propagate": {"radius": 0.1, "linkage": 0.3, "min_height": 10.0, "ground_cell": 2.0},
    "segment": {
        "eps": 0.6,
        "min_pts": 100,
        "threshold": 0.5,
        "assign_radius": 1.5,
        "cluster_dims": 3,
        "tile": 35.0,
        "inner": 8.0,
        "merge_fraction": 0.5,
    },
    "evaluate": {"min_instance_points": DEFAULT_MIN_INSTANCE_POINTS},
    "crop": {"count": 1, "seed": 0, "size": 35.0, "inner": 8.0},
    "info": {},
    "gen-fixture": {
        "trees": 50,
        "spacing": 5.0,
        "crown_radius": 1.5,
        "ground_spacing": 0.2,
        "offset_sigma": 0.0,
        "flip_fraction": 0.0,
        "seed": 0,
    },
}

# Keys never echoed into reports: they must not change report bytes.
_NOT_ECHOED = {"threads", "log_level", "config", "command"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--threads", type=int, help=f"worker threads (default: ${ENV_THREADS} or 1)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="forestseg", description="Forest point-cloud tree segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"forestseg {__version__}")
    sub = parser.add_subparsers(
        dest="command", metavar="{propagate,segment,evaluate,crop,info}", parser_class=_Parser
    )

    p = sub.add_parser(
        "propagate",
        parents=[common],
        help="propagate tree labels onto a raw cloud",
        description="Label a raw cloud from published tree labels. Trees whose highest point reaches "
        "--min-height (inclusive) are kept; smaller trees become non-tree.",
    )
    p.add_argument("--raw", help="unlabeled input cloud")
    p.add_argument("--seeds", help="cloud of tree-labeled points")
    p.add_argument("--out", help="labeled output cloud")
    p.add_argument("--radius", type=float, help="vote radius in m (default 0.1)")
    p.add_argument("--linkage", type=float, help="non-tree linkage radius in m (default 0.3)")
    p.add_argument("--min-height", type=float, help="minimum tree height in m, inclusive (default 10.0)")
    p.add_argument("--ground-cell", type=float, help="ground raster cell in m (default 2.0)")
    p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("segment", parents=[common], help="group predictions into tree instances")
    p.add_argument("--cloud", help="input cloud")
    p.add_argument("--pred", help="prediction file (FPRD)")
    p.add_argument("--out", help="output cloud whose labels are instance ids")
    p.add_argument("--mask-out", help="semantic mask sidecar (default: --out with .fmsk suffix)")
    p.add_argument("--eps", type=float, help="DBSCAN radius in m (default 0.6)")
    p.add_argument("--min-pts", type=int, help="DBSCAN core threshold (default 100)")
    p.add_argument("--threshold", type=float, help="semantic threshold, inclusive (default 0.5)")
    p.add_argument("--assign-radius", type=float, help="noise attachment radius in m (default 1.5)")
    p.add_argument("--cluster-dims", type=int, choices=[2, 3], help="cluster in 3D or in xy only (default 3)")
    p.add_argument("--tile", type=float, help="tile size in m (default 35)")
    p.add_argument("--inner", type=float, help="inner tile size in m (default 8)")
    p.add_argument("--merge-fraction", type=float, help="cross-tile merge fraction (default 0.5)")
    p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("evaluate", parents=[common], help="score predicted instances against ground truth")
    p.add_argument("--gt", help="ground-truth cloud")
    p.add_argument("--pred", help="cloud whose labels are predicted instance ids")
    p.add_argument("--pred-mask", help="semantic mask sidecar (FMSK, bit 0 = tree)")
    p.add_argument("--min-instance-points", type=int, help="ignore smaller predicted instances (default 50)")
    p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("crop", parents=[common], help="export random training crops")
    p.add_argument("--cloud", help="labeled input cloud")
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, help="number of crops (default 1)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--size", type=float, help="crop edge in m (default 35)")
    p.add_argument("--inner", type=float, help="supervised inner edge in m (default 8)")

    p = sub.add_parser("info", parents=[common], help="summarize a cloud")
    p.add_argument("--cloud", help="input cloud")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")

    # Hidden: generates the synthetic forests used by the acceptance checks.
    p = sub.add_parser("gen-fixture", parents=[common])
    p.add_argument("--out", help="output directory")
    p.add_argument("--trees", type=int)
    p.add_argument("--spacing", type=float)
    p.add_argument("--crown-radius", type=float)
    p.add_argument("--ground-spacing", type=float)
    p.add_argument("--offset-sigma", type=float)
    p.add_argument("--flip-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--withhold", type=int, nargs="*", default=None, help="tree ids left out of the seeds")
    return parser


def _load_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as handle:
        try:
            config = json.load(handle)
        except json.JSONDecodeError as err:
            raise ValueError(f"config {path}: {err}") from None
    if not isinstance(config, dict):
        raise ValueError(f"config {path}: top level must be an object")
    return config


def _resolve(args: argparse.Namespace) -> Dict[str, Any]:
    """Merge flags over config over defaults for the active subcommand."""
    config = _load_config(args.config)
    section = config.get(args.command, {})
    if not isinstance(section, dict):
        raise ValueError(f"config section {args.command!r} must be an object")
    flat = {k.replace("-", "_"): v for k, v in config.items() if not isinstance(v, dict)}
    flat.update({k.replace("-", "_"): v for k, v in section.items()})

    settings = dict(DEFAULTS.get(args.command, {}))
    for key, value in vars(args).items():
        if key in ("config", "command"):
            continue
        if value is not None:
            settings[key] = value
        elif key in flat:
            settings[key] = flat[key]
        else:
            settings.setdefault(key, None)
    unknown = set(flat) - set(settings)
    if unknown:
        raise ValueError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
    if settings.get("threads") is None:
        settings["threads"] = default_workers()
    return settings


def _require(settings: Dict[str, Any], *names: str) -> None:
    missing = [n for n in names if not settings.get(n)]
    if missing:
        raise ValueError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _echo(settings: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in sorted(settings.items()) if k not in _NOT_ECHOED}


def _write_json(path: Optional[str], payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_propagate(s: Dict[str, Any]) -> None:
    _require(s, "raw", "seeds", "out")
    params = PropagationParams(s["radius"], s["linkage"], s["min_height"], s["ground_cell"])
    raw = load_cloud(s["raw"])
    seeds = load_cloud(s["seeds"])
    cloud, summary = propagate_full(raw, seeds, params, workers=s["threads"])
    save_cloud(cloud, s["out"])
    report = summary.to_dict()
    report["config"] = _echo(s)
    _write_json(s["report"], report)
    counts = summary.class_counts
    print(
        f"{len(cloud)} points: {counts['tree']} tree ({len(summary.tree_counts)} trees), "
        f"{counts['non_tree']} non-tree, {counts['non_annotated']} non-annotated"
    )


def _mask_path(out: str, mask_out: Optional[str]) -> Path:
    return Path(mask_out) if mask_out else Path(out).with_suffix(".fmsk")


def _cmd_segment(s: Dict[str, Any]) -> None:
    _require(s, "cloud", "pred", "out")
    cloud = load_cloud(s["cloud"])
    pred = load_predictions(s["pred"], cloud)
    params = ClusterParams(s["threshold"], s["eps"], s["min_pts"], s["assign_radius"], s["cluster_dims"])
    plan = plan_for_cloud(cloud.points, s["tile"], s["inner"])
    ids = segment_tiled(cloud.points, pred, params, plan, s["merge_fraction"], workers=s["threads"])
    mask = semantic_classify(pred, params.semantic_threshold)
    save_cloud(LabeledCloud(cloud.points, ids.astype(np.int32)), s["out"])
    save_mask(_mask_path(s["out"], s["mask_out"]), mask.astype(np.uint8))
    n_instances = int(ids.max()) if len(ids) else 0
    _write_json(
        s["report"],
        {
            "n_points": len(cloud),
            "n_instances": n_instances,
            "n_tree_points": int(mask.sum()),
            "n_assigned_points": int((ids > 0).sum()),
            "tiles": plan.to_dict(),
            "config": _echo(s),
        },
    )
    print(f"{n_instances} instances from {int(mask.sum())} tree points in {len(plan.tiles)} tiles")


def _cmd_evaluate(s: Dict[str, Any]) -> None:
    _require(s, "gt", "pred")
    gt = load_cloud(s["gt"])
    pred = load_cloud(s["pred"])
    mask = None
    if s["pred_mask"]:
        mask = (load_mask(s["pred_mask"]) & 1).astype(bool)
        if len(mask) != len(gt):
            raise ValueError(f"mask holds {len(mask)} points but the ground truth has {len(gt)}")
    report = evaluate(gt, pred.labels, mask, s["min_instance_points"], params={"config": _echo(s)})
    _write_json(s["report"], report.to_dict())
    print(report.summary())


def _cmd_crop(s: Dict[str, Any]) -> None:
    _require(s, "cloud", "out")
    spec = CropSpec(s["size"], s["inner"], s["seed"], s["count"])
    manifest = export_crops(load_cloud(s["cloud"]), spec, s["out"], workers=s["threads"])
    print(f"wrote {len(manifest['crops'])} crops to {s['out']}")


def cloud_info(cloud: LabeledCloud) -> dict:
    info: Dict[str, Any] = {
        "n_points": len(cloud),
        "class_counts": class_counts(cloud.labels),
        "n_trees": int(len(cloud.tree_ids())),
    }
    if len(cloud):
        info["bounds"] = {"min": cloud.points.min(axis=0).tolist(), "max": cloud.points.max(axis=0).tolist()}
    return info


def _cmd_info(s: Dict[str, Any]) -> None:
    _require(s, "cloud")
    info = cloud_info(load_cloud(s["cloud"]))
    if s["json"]:
        print(json.dumps(info, indent=2, sort_keys=True))
        return
    counts = info["class_counts"]
    print(f"points: {info['n_points']}")
    print(
        f"tree: {counts['tree']}  non-tree: {counts['non_tree']}  "
        f"non-annotated: {counts['non_annotated']}  unlabeled: {counts['unlabeled']}"
    )
    print(f"trees: {info['n_trees']}")
    if "bounds" in info:
        lo, hi = info["bounds"]["min"], info["bounds"]["max"]
        print("bounds: " + " ".join(f"[{a:.3f}, {b:.3f}]" for a, b in zip(lo, hi)))


def _cmd_gen_fixture(s: Dict[str, Any]) -> None:
    _require(s, "out")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    forest = make_forest(
        n_trees=s["trees"],
        spacing=s["spacing"],
        crown_radius=s["crown_radius"],
        ground_spacing=s["ground_spacing"],
        seed=s["seed"],
    )
    if s["offset_sigma"] or s["flip_fraction"]:
        pred = noisy_predictions(forest, s["offset_sigma"], s["flip_fraction"], seed=s["seed"])
    else:
        pred = oracle_predictions(forest)
    save_cloud(forest.raw, out / "raw.fseg")
    save_cloud(forest.seeds(s["withhold"] or ()), out / "seeds.fseg")
    save_cloud(forest.cloud, out / "gt.fseg")
    save_predictions(out / "pred.fprd", pred.semantic_score, pred.offset)
    _write_json(str(out / "fixture.json"), {"n_points": len(forest.cloud), "config": _echo(s)})
    print(f"fixture with {s['trees']} trees and {len(forest.cloud)} points in {out}")


COMMANDS = {
    "propagate": _cmd_propagate,
    "segment": _cmd_segment,
    "evaluate": _cmd_evaluate,
    "crop": _cmd_crop,
    "info": _cmd_info,
    "gen-fixture": _cmd_gen_fixture,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as err:  # --help / --version
        return int(err.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        settings = _resolve(args)
        logging.basicConfig(
            level=settings.get("log_level") or "WARNING", format="%(asctime)s %(name)s %(levelname)s %(message)s"
        )
        COMMANDS[args.command](settings)
    except OSError as err:
        print(f"forestseg: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"forestseg: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())
