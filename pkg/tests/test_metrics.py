import math

import numpy as np
import pytest

from occkit import (
    GridSpec,
    LabelGrid,
    ProbGrid,
    SpecMismatchError,
    VoxelMask,
    argmax_labels,
    evaluate,
    evaluate_prob,
)
from occkit.grid import DEFAULT_CLASS_TABLE

import oracles
from conftest import random_labelgrid, random_mask, random_probgrid


def two_class_fixture():
    """gt [4,4,17,17] vs pred [4,17,4,17] on a 2x2x1 grid, 18 classes."""
    spec = GridSpec(dims=(2, 2, 1), voxel_size=1.0, origin=(0, 0, 0), num_classes=18)
    gt = LabelGrid(spec, np.array([4, 4, 17, 17], dtype=np.uint8))
    pred = LabelGrid(spec, np.array([4, 17, 4, 17], dtype=np.uint8))
    return spec, pred, gt


class TestEvaluate:
    def test_perfect_prediction(self):
        spec = GridSpec(dims=(3, 3, 2), voxel_size=1.0, origin=(0, 0, 0), num_classes=18)
        labels = np.full(spec.dims, 17, dtype=np.uint8)
        labels[0, 0, 0] = 4
        labels[2, 1, 1] = 4
        g = LabelGrid(spec, labels)
        report = evaluate(g, g, VoxelMask.full(spec))
        assert report.per_class[4] == 1.0
        assert all(v is None for c, v in enumerate(report.per_class) if c != 4)
        assert report.miou == 1.0

    def test_counting_fixture(self):
        # brute force over the 4 voxels: class 4 has I=1 (voxel 0),
        # U=3 (voxels 0, 1, 2)
        spec, pred, gt = two_class_fixture()
        report = evaluate(pred, gt, VoxelMask.full(spec))
        assert report.counts[4] == (1, 3)
        assert report.per_class[4] == pytest.approx(1 / 3)
        assert report.miou == pytest.approx(1 / 3)

    def test_masked_recount(self):
        # dropping voxel 1 leaves I=1 (voxel 0), U=2 (voxels 0, 2)
        spec, pred, gt = two_class_fixture()
        mask = VoxelMask(spec, np.array([1, 0, 1, 1], dtype=np.uint8))
        report = evaluate(pred, gt, mask)
        assert report.counts[4] == (1, 2)
        assert report.per_class[4] == pytest.approx(0.5)

    def test_spec_mismatch(self, small_spec):
        other = GridSpec(dims=(4, 4, 2), voxel_size=1.0, origin=(0, 0, 0), num_classes=5)
        a = LabelGrid(small_spec, np.zeros(small_spec.dims, dtype=np.uint8))
        b = LabelGrid(other, np.zeros(other.dims, dtype=np.uint8))
        with pytest.raises(SpecMismatchError):
            evaluate(a, b, VoxelMask.full(small_spec))

    def test_matches_set_counting_oracle(self, small_spec):
        rng = np.random.default_rng(123)
        for _ in range(60):
            pred = random_labelgrid(small_spec, rng)
            gt = random_labelgrid(small_spec, rng)
            mask = random_mask(small_spec, rng)
            report = evaluate(pred, gt, mask)
            expected = oracles.iou_counts(
                pred.labels.ravel(), gt.labels.ravel(), mask.bits.ravel(), 5
            )
            assert list(report.counts) == expected
            ref_miou = oracles.miou_from_counts(expected)
            if math.isnan(ref_miou):
                assert math.isnan(report.miou)
            else:
                assert report.miou == pytest.approx(ref_miou, abs=1e-15)

    def test_mask_invariance(self, small_spec):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pred = random_labelgrid(small_spec, rng)
            gt = random_labelgrid(small_spec, rng)
            mask = random_mask(small_spec, rng, density=0.5)
            base = evaluate(pred, gt, mask)
            # scribble over every masked-out voxel
            labels = pred.labels.copy()
            hidden = ~mask.bits
            labels[hidden] = rng.integers(0, 5, size=int(hidden.sum()))
            mutated = evaluate(LabelGrid(small_spec, labels), gt, mask)
            assert mutated == base

    def test_swap_symmetry(self, small_spec):
        rng = np.random.default_rng(9)
        pred = random_labelgrid(small_spec, rng)
        gt = random_labelgrid(small_spec, rng)
        mask = random_mask(small_spec, rng)
        a = evaluate(pred, gt, mask)
        b = evaluate(gt, pred, mask)
        assert a.counts == b.counts

    def test_bounds(self, small_spec):
        rng = np.random.default_rng(31)
        for _ in range(20):
            report = evaluate(
                random_labelgrid(small_spec, rng),
                random_labelgrid(small_spec, rng),
                random_mask(small_spec, rng),
            )
            for v in report.per_class:
                if v is not None:
                    assert 0.0 <= v <= 1.0

    def test_strict_zero_flag(self):
        spec, pred, gt = two_class_fixture()
        report = evaluate(pred, gt, VoxelMask.full(spec), strict_zero=True)
        # one defined class at 1/3, sixteen undefined scored zero
        assert report.miou == pytest.approx((1 / 3) / 17)
        assert report.per_class[4] == pytest.approx(1 / 3)
        assert report.per_class[0] is None


class TestEvaluateProb:
    def test_one_hot_reduces_to_perfect(self, small_spec):
        rng = np.random.default_rng(2)
        gt = random_labelgrid(small_spec, rng)
        p = np.zeros(small_spec.dims + (5,))
        idx = np.indices(small_spec.dims)
        p[idx[0], idx[1], idx[2], gt.labels] = 1.0
        report = evaluate_prob(ProbGrid(small_spec, p), gt, VoxelMask.full(small_spec))
        assert report.miou == 1.0

    def test_uniform_equals_zero_labels(self, small_spec):
        rng = np.random.default_rng(3)
        gt = random_labelgrid(small_spec, rng)
        mask = random_mask(small_spec, rng)
        uniform = ProbGrid(small_spec, np.full(small_spec.dims + (5,), 0.2))
        zeros = LabelGrid(small_spec, np.zeros(small_spec.dims, dtype=np.uint8))
        assert evaluate_prob(uniform, gt, mask) == evaluate(zeros, gt, mask)

    def test_composition_oracle(self, small_spec):
        rng = np.random.default_rng(4)
        for _ in range(10):
            p = random_probgrid(small_spec, rng)
            gt = random_labelgrid(small_spec, rng)
            mask = random_mask(small_spec, rng)
            assert evaluate_prob(p, gt, mask) == evaluate(argmax_labels(p), gt, mask)


class TestReportSerialization:
    def test_json_dict(self):
        spec, pred, gt = two_class_fixture()
        report = evaluate(pred, gt, VoxelMask.full(spec))
        obj = report.to_json_dict(DEFAULT_CLASS_TABLE)
        assert obj["miou"] == pytest.approx(1 / 3)
        assert obj["per_class"]["car"] == pytest.approx(1 / 3)
        assert obj["per_class"]["bus"] is None
        assert obj["counts"]["car"] == [1, 3]
        assert "free" not in obj["per_class"]
