"""Command-line front end wiring the modules into the evaluation pipeline.

Subcommands:
    eval      score a prediction against ground truth under a mask
    ensemble  fuse probability grids, optionally folding in detection boxes
    det2occ   convert detection boxes to a probability grid
    cutout    apply deterministic cutout to an image set
    selfcheck run the gradient and property suites

Exit codes: 0 success, 1 check failure, 2 usage/format/validation error.
All outputs are written atomically; a failing run leaves no partial files.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .augment import CutoutSpec, cutout as apply_cutout
from .det2occ import boxes_to_probgrid
from .ensemble import EnsembleWeights, max_prob_fuse, vote_fuse, weighted_average
from .errors import OcckitError, ValidationError
from .grid import DEFAULT_CLASS_TABLE, DEFAULT_GRID_SPEC, LabelGrid, ProbGrid, VoxelMask
from .io import (
    FORMAT_VERSION,
    RunConfig,
    atomic_write,
    load_run_config,
    parse_grid_spec,
    parse_thresholds,
    read_boxes,
    read_grid,
    read_image_set,
    write_grid,
    write_image_set,
)
from .metrics import evaluate, evaluate_prob
from .selfcheck import run_suites


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _resolve_spec(value: str):
    if value == "default":
        return DEFAULT_GRID_SPEC
    with open(value, "r", encoding="utf-8") as f:
        return parse_grid_spec(json.load(f))


def _resolve_thresholds(path: Optional[str], num_classes: int, config: RunConfig):
    if path:
        with open(path, "r", encoding="utf-8") as f:
            return parse_thresholds(json.load(f), num_classes)
    if config.thresholds is not None:
        return config.thresholds
    return None


def cmd_eval(args) -> int:
    pred = read_grid(args.pred)
    gt = read_grid(args.gt)
    if not isinstance(gt, LabelGrid):
        raise ValidationError(f"{args.gt}: ground truth must be a label grid")
    if args.mask:
        mask = read_grid(args.mask)
        if not isinstance(mask, VoxelMask):
            raise ValidationError(f"{args.mask}: mask file does not hold a mask payload")
    else:
        mask = VoxelMask.full(gt.spec)
    if isinstance(pred, ProbGrid):
        report = evaluate_prob(pred, gt, mask, strict_zero=args.strict_zero)
    elif isinstance(pred, LabelGrid):
        report = evaluate(pred, gt, mask, strict_zero=args.strict_zero)
    else:
        raise ValidationError(f"{args.pred}: prediction must be labels or probabilities")
    if args.report:
        payload = json.dumps(report.to_json_dict(DEFAULT_CLASS_TABLE), indent=2).encode()
        atomic_write(args.report, lambda f: f.write(payload))
    print(f"{report.miou:.4f}")
    return 0


def cmd_ensemble(args) -> int:
    config = _load_config(args)
    strategy = args.strategy or config.strategy
    n_models = len(args.inputs) + (1 if args.boxes else 0)
    if args.weights is not None:
        weights = EnsembleWeights(tuple(args.weights))
    elif config.weights is not None:
        weights = config.weights
    else:
        weights = EnsembleWeights.uniform(n_models)
    if len(weights) != n_models:
        raise ValidationError(
            f"{len(weights)} weights for {n_models} models "
            "(detection boxes count as one model)"
        )

    grids = [read_grid(p) for p in args.inputs]
    for path, g in zip(args.inputs, grids):
        if not isinstance(g, ProbGrid):
            raise ValidationError(f"{path}: ensemble inputs must be probability grids")
    if args.boxes:
        spec = grids[0].spec
        thresholds = _resolve_thresholds(args.thresholds, spec.num_classes, config)
        cfg = RunConfig(
            grid=spec,
            thresholds=thresholds,
            spacing_t=args.t if args.t is not None else config.spacing_t,
        ).conversion_config()
        grids.append(boxes_to_probgrid(read_boxes(args.boxes), spec, cfg))

    if strategy == "weighted":
        out = weighted_average(grids, weights)
    elif strategy == "max":
        out = max_prob_fuse(grids)
    else:
        out = vote_fuse(grids)
    write_grid(args.output, out)
    return 0


def cmd_det2occ(args) -> int:
    config = _load_config(args)
    spec = _resolve_spec(args.spec) if args.spec else config.grid
    thresholds = _resolve_thresholds(args.thresholds, spec.num_classes, config)
    cfg = RunConfig(
        grid=spec,
        thresholds=thresholds,
        spacing_t=args.t if args.t is not None else config.spacing_t,
    ).conversion_config()
    write_grid(args.output, boxes_to_probgrid(read_boxes(args.boxes), spec, cfg))
    return 0


def cmd_cutout(args) -> int:
    config = _load_config(args)
    imgs = read_image_set(args.input)
    base = config.cutout
    spec = CutoutSpec(
        seed=args.seed if args.seed is not None else base.seed,
        num_holes=args.holes if args.holes is not None else base.num_holes,
        hole_h=max(1, int(imgs.h * args.size)) if args.size is not None else base.hole_h,
        hole_w=max(1, int(imgs.w * args.size)) if args.size is not None else base.hole_w,
        fill=args.fill if args.fill is not None else base.fill,
    )
    write_image_set(args.output, apply_cutout(imgs, spec))
    return 0


def cmd_selfcheck(args) -> int:
    results = run_suites(quick=args.quick)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: {status} ({r.detail})")
        failed += not r.passed
    if failed:
        print(f"{failed} suite(s) failed", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="occkit",
        description="Voxel occupancy pipeline toolkit",
    )
    p.add_argument(
        "--version",
        action="version",
        version=f"occkit {__version__} (OCCK format v{FORMAT_VERSION})",
    )
    sub = p.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("eval", help="score a prediction against ground truth")
    ev.add_argument("--pred", required=True, help="predicted labels or probabilities (.occk)")
    ev.add_argument("--gt", required=True, help="ground-truth labels (.occk)")
    ev.add_argument("--mask", help="evaluation mask (.occk); defaults to all voxels")
    ev.add_argument("--report", help="write the per-class IoU report JSON here")
    ev.add_argument(
        "--strict-zero",
        action="store_true",
        help="score classes with empty masked union 0 instead of excluding them",
    )
    ev.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="fuse probability grids")
    en.add_argument("--inputs", nargs="+", required=True, help="input probability grids")
    en.add_argument("--weights", nargs="+", type=float, help="per-model weights (default uniform)")
    en.add_argument("--strategy", choices=("weighted", "max", "vote"))
    en.add_argument("--boxes", help="detection boxes (JSONL) to fold in as one more model")
    en.add_argument("--t", type=float, help="lattice spacing for box conversion (m)")
    en.add_argument("--thresholds", help="per-class score threshold JSON for box conversion")
    en.add_argument("--config", help="run configuration JSON")
    en.add_argument("--output", required=True)
    en.set_defaults(func=cmd_ensemble)

    dt = sub.add_parser("det2occ", help="convert detection boxes to occupancy")
    dt.add_argument("--boxes", required=True, help="detection boxes (JSONL)")
    dt.add_argument("--spec", help='"default" or a grid-spec JSON path')
    dt.add_argument("--t", type=float, help="lattice spacing in meters")
    dt.add_argument("--thresholds", help="per-class score threshold JSON")
    dt.add_argument("--config", help="run configuration JSON")
    dt.add_argument("--output", required=True)
    dt.set_defaults(func=cmd_det2occ)

    co = sub.add_parser("cutout", help="apply cutout augmentation to an image set")
    co.add_argument("--input", required=True, help="image set (.occk, payload kind 5)")
    co.add_argument("--holes", type=int, help="holes per image (default 1)")
    co.add_argument("--size", type=float, help="hole size as a fraction of image dims (default 0.25)")
    co.add_argument("--seed", type=int, help="sampler seed (default 42)")
    co.add_argument("--fill", type=float, help="fill value (default 0)")
    co.add_argument("--config", help="run configuration JSON")
    co.add_argument("--output", required=True)
    co.set_defaults(func=cmd_cutout)

    sc = sub.add_parser("selfcheck", help="run gradient and property suites")
    sc.add_argument("--quick", action="store_true", help="abbreviated suites, a few seconds")
    sc.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OcckitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
