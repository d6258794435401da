import numpy as np
import pytest

from occkit import (
    EnsembleWeights,
    ProbGrid,
    ValidationError,
    argmax_labels,
    max_prob_fuse,
    vote_fuse,
    weighted_average,
)

from conftest import random_probgrid


class TestEnsembleWeights:
    def test_validation(self):
        with pytest.raises(ValidationError):
            EnsembleWeights(())
        with pytest.raises(ValidationError):
            EnsembleWeights((1.0, 0.0))
        with pytest.raises(ValidationError):
            EnsembleWeights((1.0, -2.0))

    def test_normalized(self):
        w = EnsembleWeights((2.0, 6.0)).normalized()
        assert np.allclose(w, [0.25, 0.75])


class TestWeightedAverage:
    def test_identical_grids_idempotent(self, small_spec):
        rng = np.random.default_rng(0)
        g = random_probgrid(small_spec, rng)
        out = weighted_average([g, g], (0.3, 1.7))
        assert np.abs(out.probs - g.probs).max() <= 1e-12

    def test_dominant_weight_limit(self, small_spec):
        rng = np.random.default_rng(1)
        a = random_probgrid(small_spec, rng)
        b = random_probgrid(small_spec, rng)
        out = weighted_average([a, b], (1e9, 1.0))
        assert np.abs(out.probs - a.probs).max() <= 1e-6

    def test_direct_arithmetic(self):
        # ([0.8, 0.2] + [0.4, 0.6]) / 2 = [0.6, 0.4]
        from occkit import GridSpec

        spec = GridSpec(dims=(1, 1, 1), voxel_size=1.0, origin=(0, 0, 0), num_classes=2)
        a = ProbGrid(spec, np.array([0.8, 0.2]))
        b = ProbGrid(spec, np.array([0.4, 0.6]))
        out = weighted_average([a, b], (1.0, 1.0))
        assert np.allclose(out.probs.ravel(), [0.6, 0.4], atol=1e-15)

    def test_normalization_preserved(self, small_spec):
        rng = np.random.default_rng(2)
        for _ in range(25):
            grids = [random_probgrid(small_spec, rng) for _ in range(3)]
            w = tuple(rng.uniform(0.1, 5.0, size=3))
            out = weighted_average(grids, w)
            sums = out.probs.sum(axis=-1)
            assert np.abs(sums - 1.0).max() <= 1e-12

    def test_weight_scaling_invariance(self, small_spec):
        rng = np.random.default_rng(3)
        grids = [random_probgrid(small_spec, rng) for _ in range(3)]
        a = weighted_average(grids, (1.0, 2.0, 3.0))
        b = weighted_average(grids, (10.0, 20.0, 30.0))
        assert np.abs(a.probs - b.probs).max() <= 1e-12

    def test_permutation_equivariance(self, small_spec):
        rng = np.random.default_rng(4)
        grids = [random_probgrid(small_spec, rng) for _ in range(3)]
        w = (0.5, 1.5, 3.0)
        a = weighted_average(grids, w)
        perm = [2, 0, 1]
        b = weighted_average([grids[i] for i in perm], tuple(w[i] for i in perm))
        assert np.abs(a.probs - b.probs).max() <= 1e-12

    def test_errors(self, small_spec):
        rng = np.random.default_rng(5)
        g = random_probgrid(small_spec, rng)
        with pytest.raises(ValidationError):
            weighted_average([], (1.0,))
        with pytest.raises(ValidationError):
            weighted_average([g, g], (1.0,))


class TestMaxProbFuse:
    def test_single_grid_identity(self, small_spec):
        rng = np.random.default_rng(6)
        g = random_probgrid(small_spec, rng)
        assert np.array_equal(max_prob_fuse([g]).probs, g.probs)

    def test_one_hot_dominates_uniform(self, small_spec):
        one_hot = np.zeros(small_spec.dims + (5,))
        one_hot[..., 3] = 1.0
        a = ProbGrid(small_spec, one_hot)
        b = ProbGrid(small_spec, np.full(small_spec.dims + (5,), 0.2))
        out = max_prob_fuse([a, b])
        assert np.array_equal(out.probs, a.probs)

    def test_compares_peaks(self):
        from occkit import GridSpec

        spec = GridSpec(dims=(1, 1, 1), voxel_size=1.0, origin=(0, 0, 0), num_classes=2)
        a = ProbGrid(spec, np.array([0.6, 0.4]))
        b = ProbGrid(spec, np.array([0.7, 0.3]))
        out = max_prob_fuse([a, b])
        assert np.allclose(out.probs.ravel(), [0.7, 0.3])

    def test_tie_goes_to_first_model(self, small_spec):
        rng = np.random.default_rng(7)
        g = random_probgrid(small_spec, rng)
        h = ProbGrid(small_spec, g.probs[..., ::-1].copy())  # same peak values
        out = max_prob_fuse([g, h])
        assert np.array_equal(out.probs, g.probs)


class TestVoteFuse:
    def test_unanimity(self, small_spec):
        rng = np.random.default_rng(8)
        g = random_probgrid(small_spec, rng)
        out = vote_fuse([g, g, g])
        assert np.array_equal(out.labels, argmax_labels(g).labels)

    def test_majority(self):
        from occkit import GridSpec

        spec = GridSpec(dims=(1, 1, 1), voxel_size=1.0, origin=(0, 0, 0), num_classes=18)

        def one_hot(c):
            p = np.zeros(18)
            p[c] = 1.0
            return ProbGrid(spec, p)

        out = vote_fuse([one_hot(4), one_hot(4), one_hot(9)])
        assert out.labels.ravel()[0] == 4

    def test_tie_breaks_low(self):
        from occkit import GridSpec

        spec = GridSpec(dims=(1, 1, 1), voxel_size=1.0, origin=(0, 0, 0), num_classes=18)

        def one_hot(c):
            p = np.zeros(18)
            p[c] = 1.0
            return ProbGrid(spec, p)

        out = vote_fuse([one_hot(9), one_hot(4)])
        assert out.labels.ravel()[0] == 4

    def test_grid_permutation_invariance(self, small_spec):
        rng = np.random.default_rng(9)
        grids = [random_probgrid(small_spec, rng) for _ in range(3)]
        a = vote_fuse(grids)
        b = vote_fuse(grids[::-1])
        assert np.array_equal(a.labels, b.labels)


def test_strategies_agree_on_consensus_voxels(small_spec):
    rng = np.random.default_rng(10)
    for _ in range(20):
        grids = [random_probgrid(small_spec, rng) for _ in range(3)]
        votes = np.stack([argmax_labels(g).labels.ravel() for g in grids])
        consensus = np.all(votes == votes[0], axis=0)
        if not consensus.any():
            continue
        agreed = votes[0][consensus]
        w = argmax_labels(weighted_average(grids, (1.0, 2.0, 0.5))).labels.ravel()
        m = argmax_labels(max_prob_fuse(grids)).labels.ravel()
        v = vote_fuse(grids).labels.ravel()
        assert np.array_equal(w[consensus], agreed)
        assert np.array_equal(m[consensus], agreed)
        assert np.array_equal(v[consensus], agreed)
