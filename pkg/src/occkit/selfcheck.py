"""Built-in verification suites behind the `selfcheck` CLI subcommand.

The centerpiece is the gradient suite: analytic gradients from
head.backward against central finite differences (step 1e-6) for every
parameter tensor. The relative error of a tensor is
||analytic - numeric||_2 / max(||analytic||_2 + ||numeric||_2, 1e-12);
the suite passes when the maximum over tensors and seeds is <= 1e-4.
The remaining suites re-derive a handful of module contracts from
independent straight-line references.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import augment, det2occ, ensemble, head, io, metrics
from .grid import GridSpec, LabelGrid, ProbGrid, VoxelMask, argmax_labels

GRAD_TOL = 1e-4
FD_STEP = 1e-6


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _toy_config(num_classes: int = 6) -> head.HeadConfig:
    return head.HeadConfig(
        bev_c=4,
        hidden=4,
        depth=8,
        voxel_channels=1,
        enc_channels=(2, 2, 2),
        dec_channels=(2, 2, 2),
        num_classes=num_classes,
    )


def _toy_instance(seed: int, num_classes: int = 6):
    rng = np.random.default_rng(seed)
    cfg = _toy_config(num_classes)
    params = head.init_head_params(cfg, rng)
    q = head.BevQueryGrid(rng.normal(size=(8, 8, cfg.bev_c)))
    spec = GridSpec(dims=(8, 8, 8), voxel_size=1.0, origin=(0.0, 0.0, 0.0), num_classes=num_classes)
    gt = LabelGrid(spec, rng.integers(0, num_classes, size=spec.dims).astype(np.uint8))
    mask = VoxelMask(spec, rng.random(spec.dims) < 0.8)
    return q, gt, mask, params


def finite_difference_gradients(q, gt, mask, params, step: float = FD_STEP):
    """Central-difference gradients of total_loss for every parameter entry."""
    lam_ce, lam_dice = params.loss_weights

    def loss() -> float:
        return head.total_loss(head.head_logits(q, params), gt, mask, lam_ce, lam_dice)

    out = {}
    for name, arr in head.named_parameters(params):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def gradient_errors(q, gt, mask, params) -> dict:
    """Per-tensor relative error between analytic and numeric gradients."""
    analytic = head.backward(q, gt, mask, params)
    numeric = finite_difference_gradients(q, gt, mask, params)
    errs = {}
    for name, num in numeric.items():
        a = analytic[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(num), 1e-12)
        errs[name] = float(np.linalg.norm(a - num) / denom)
    return errs


def gradient_suite(quick: bool) -> SuiteResult:
    seeds = (7,) if quick else (7, 19, 23)
    worst = 0.0
    for seed in seeds:
        q, gt, mask, params = _toy_instance(seed)
        worst = max(worst, max(gradient_errors(q, gt, mask, params).values()))
    return SuiteResult(
        "gradient-check",
        worst <= GRAD_TOL,
        f"max rel err {worst:.3e} over {len(seeds)} seed(s) (tol {GRAD_TOL:.0e})",
    )


def closed_form_ce_suite(quick: bool) -> SuiteResult:
    # with all-zero parameters the logits are uniform, so the CE gradient of
    # the classifier bias is the voxel average of softmax minus one-hot
    q, gt, mask, params = _toy_instance(3)
    for _, arr in head.named_parameters(params):
        arr[...] = 0.0
    params.loss_weights = (1.0, 0.0)
    grads = head.backward(q, gt, None, params)
    ncls = params.num_classes
    n = gt.labels.size
    counts = np.bincount(gt.labels.ravel(), minlength=ncls)
    expected = 1.0 / ncls - counts / n
    err = float(np.abs(grads["cls.bias"] - expected).max())
    return SuiteResult("closed-form-ce-grad", err <= 1e-12, f"max abs err {err:.3e}")


def loss_anchor_suite(quick: bool) -> SuiteResult:
    spec = GridSpec(dims=(2, 2, 2), voxel_size=1.0, origin=(0, 0, 0), num_classes=18)
    rng = np.random.default_rng(0)
    gt = LabelGrid(spec, rng.integers(0, 18, size=spec.dims).astype(np.uint8))
    uniform = np.zeros(spec.dims + (18,))
    ce_err = abs(head.ce_loss(uniform, gt) - math.log(18.0))
    onehot = np.full(spec.dims + (18,), -50.0)
    idx = np.indices(spec.dims)
    onehot[idx[0], idx[1], idx[2], gt.labels] = 50.0
    dice_perfect = head.dice_loss(onehot, gt)
    ce_sharp = head.ce_loss(onehot, gt)
    lin = abs(
        head.total_loss(uniform, gt, None, 2.0, 3.0)
        - (2.0 * head.ce_loss(uniform, gt) + 3.0 * head.dice_loss(uniform, gt))
    )
    ok = ce_err <= 1e-9 and abs(dice_perfect) <= 1e-12 and ce_sharp <= 1e-9 and lin <= 1e-12
    return SuiteResult(
        "loss-anchors",
        ok,
        f"|ce-ln18| {ce_err:.1e}, perfect dice {dice_perfect:.1e}, linearity {lin:.1e}",
    )


def descent_suite(quick: bool) -> SuiteResult:
    trials = 5 if quick else 20
    worst = -np.inf
    for seed in range(trials):
        q, gt, mask, params = _toy_instance(100 + seed)
        lam_ce, lam_dice = params.loss_weights
        before = head.total_loss(head.head_logits(q, params), gt, mask, lam_ce, lam_dice)
        stepped = head.sgd_step(params, head.backward(q, gt, mask, params), 1e-3)
        after = head.total_loss(head.head_logits(q, stepped), gt, mask, lam_ce, lam_dice)
        worst = max(worst, after - before)
    return SuiteResult(
        "descent-sanity", worst <= 1e-12, f"worst loss delta {worst:+.3e} over {trials} trials"
    )


def metrics_suite(quick: bool) -> SuiteResult:
    trials = 10 if quick else 50
    rng = np.random.default_rng(11)
    spec = GridSpec(dims=(4, 4, 2), voxel_size=1.0, origin=(0, 0, 0), num_classes=5)
    for _ in range(trials):
        pred = LabelGrid(spec, rng.integers(0, 5, size=spec.dims).astype(np.uint8))
        gt = LabelGrid(spec, rng.integers(0, 5, size=spec.dims).astype(np.uint8))
        mask = VoxelMask(spec, rng.random(spec.dims) < 0.7)
        report = metrics.evaluate(pred, gt, mask)
        # straight-line recount over explicit voxel sets
        for c in range(4):
            inter = union = 0
            for v in range(spec.n_voxels):
                if not mask.bits.ravel()[v]:
                    continue
                pv = pred.labels.ravel()[v] == c
                gv = gt.labels.ravel()[v] == c
                inter += pv and gv
                union += pv or gv
            if report.counts[c] != (inter, union):
                return SuiteResult(
                    "metrics-oracle", False, f"class {c}: {report.counts[c]} != {(inter, union)}"
                )
    return SuiteResult("metrics-oracle", True, f"{trials} randomized grids, exact counts")


def ensemble_suite(quick: bool) -> SuiteResult:
    trials = 5 if quick else 20
    rng = np.random.default_rng(5)
    spec = GridSpec(dims=(4, 4, 2), voxel_size=1.0, origin=(0, 0, 0), num_classes=6)

    def random_grid():
        p = rng.random(spec.dims + (6,))
        return ProbGrid(spec, p / p.sum(axis=-1, keepdims=True))

    worst_norm = 0.0
    worst_dom = 0.0
    worst_idem = 0.0
    for _ in range(trials):
        a, b = random_grid(), random_grid()
        fused = ensemble.weighted_average([a, b], (rng.random() + 0.1, rng.random() + 0.1))
        worst_norm = max(
            worst_norm, float(np.abs(fused.probs.sum(axis=-1) - 1.0).max())
        )
        dom = ensemble.weighted_average([a, b], (1e9, 1.0))
        worst_dom = max(worst_dom, float(np.abs(dom.probs - a.probs).max()))
        idem = ensemble.weighted_average([a, a], (0.3, 0.7))
        worst_idem = max(worst_idem, float(np.abs(idem.probs - a.probs).max()))
    ok = worst_norm <= 1e-12 and worst_dom <= 1e-6 and worst_idem <= 1e-12
    return SuiteResult(
        "ensemble-validity",
        ok,
        f"norm {worst_norm:.1e}, dominant {worst_dom:.1e}, idempotent {worst_idem:.1e}",
    )


def det2occ_suite(quick: bool) -> SuiteResult:
    scenes = 2 if quick else 5
    rng = np.random.default_rng(17)
    spec = GridSpec(dims=(16, 16, 8), voxel_size=0.5, origin=(-4.0, -4.0, -2.0), num_classes=6)
    cfg = det2occ.ConversionConfig.uniform(6, threshold=0.2, spacing_t=0.25)
    for _ in range(scenes):
        boxes = [
            det2occ.DetectionBox(
                center=tuple(rng.uniform(-3.5, 3.5, size=2)) + (rng.uniform(-1.5, 1.5),),
                size=tuple(rng.uniform(0.4, 2.5, size=3)),
                yaw=rng.uniform(-math.pi, math.pi),
                class_id=int(rng.integers(0, 5)),
                score=float(rng.uniform(0.0, 1.0)),
            )
            for _ in range(5)
        ]
        labels, scores = det2occ.voxelize_boxes(boxes, spec, cfg)
        ref_labels, ref_scores = _reference_voxelize(boxes, spec, cfg)
        if not (
            np.array_equal(labels.labels, ref_labels) and np.array_equal(scores, ref_scores)
        ):
            return SuiteResult("det2occ-oracle", False, "mismatch vs naive per-point loop")
    return SuiteResult("det2occ-oracle", True, f"{scenes} scenes, exact agreement")


def _reference_voxelize(boxes, spec, cfg):
    """Naive per-box per-point rasterizer with the documented tie-breaks."""
    labels = np.full(spec.dims, spec.free_label, dtype=np.uint8)
    scores = np.zeros(spec.dims, dtype=np.float64)
    for b in boxes:
        if b.score < cfg.thresholds[b.class_id]:
            continue
        for point in det2occ.box_to_points(b, cfg.spacing_t):
            v = spec.world_to_voxel(point)
            if v is None:
                continue
            cur_s, cur_c = scores[v], labels[v]
            if b.score > cur_s or (b.score == cur_s and b.class_id < cur_c):
                labels[v] = b.class_id
                scores[v] = b.score
    return labels, scores


def roundtrip_suite(quick: bool) -> SuiteResult:
    rng = np.random.default_rng(23)
    spec = GridSpec(dims=(3, 4, 5), voxel_size=0.4, origin=(-1.0, 0.0, 2.0), num_classes=7)
    lab = LabelGrid(spec, rng.integers(0, 7, size=spec.dims).astype(np.uint8))
    p = rng.random(spec.dims + (7,))
    prob = ProbGrid(spec, p / p.sum(axis=-1, keepdims=True))
    mask = VoxelMask(spec, rng.random(spec.dims) < 0.5)
    with tempfile.TemporaryDirectory() as tmp:
        for i, g in enumerate((lab, prob, mask)):
            path = os.path.join(tmp, f"g{i}.occk")
            io.write_grid(path, g)
            back = io.read_grid(path)
            if back.spec != g.spec:
                return SuiteResult("format-roundtrip", False, "spec mismatch after read")
            arr = {0: "labels", 1: "probs", 2: "bits"}[i]
            if not np.allclose(getattr(back, arr), getattr(g, arr), rtol=0, atol=1e-12):
                return SuiteResult("format-roundtrip", False, f"{arr} changed in round-trip")
    return SuiteResult("format-roundtrip", True, "labels, probs, mask round-trip clean")


def cutout_suite(quick: bool) -> SuiteResult:
    rng = np.random.default_rng(29)
    imgs = augment.ImageSet(rng.random((2, 16, 12, 3)))
    spec = augment.CutoutSpec(seed=99, num_holes=2, hole_h=4, hole_w=5)
    a = augment.cutout(imgs, spec)
    b = augment.cutout(imgs, spec)
    if not np.array_equal(a.data, b.data):
        return SuiteResult("cutout-determinism", False, "same seed produced different output")
    if np.array_equal(a.data, imgs.data):
        return SuiteResult("cutout-determinism", False, "cutout had no effect")
    none = augment.cutout(imgs, augment.CutoutSpec(seed=99, num_holes=0))
    if not np.array_equal(none.data, imgs.data):
        return SuiteResult("cutout-determinism", False, "zero holes must be the identity")
    return SuiteResult("cutout-determinism", True, "bit-identical across runs; 0-hole identity")


def run_suites(quick: bool = False) -> List[SuiteResult]:
    suites = [
        gradient_suite,
        closed_form_ce_suite,
        loss_anchor_suite,
        descent_suite,
        metrics_suite,
        ensemble_suite,
        det2occ_suite,
        roundtrip_suite,
        cutout_suite,
    ]
    return [s(quick) for s in suites]
