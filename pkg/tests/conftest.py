import numpy as np
import pytest

from occkit import GridSpec, LabelGrid, ProbGrid, VoxelMask


@pytest.fixture
def small_spec():
    return GridSpec(dims=(4, 4, 2), voxel_size=0.5, origin=(0.0, 0.0, 0.0), num_classes=5)


def random_probgrid(spec, rng):
    p = rng.random(spec.dims + (spec.num_classes,))
    return ProbGrid(spec, p / p.sum(axis=-1, keepdims=True))


def random_labelgrid(spec, rng):
    return LabelGrid(spec, rng.integers(0, spec.num_classes, size=spec.dims).astype(np.uint8))


def random_mask(spec, rng, density=0.7):
    return VoxelMask(spec, rng.random(spec.dims) < density)
