"""Fusing per-voxel class distributions from several models.

Weighted probability averaging is the strategy of record; max-probability
selection and per-voxel voting are the baselines it is compared against.
All three are voxel-local, so memory stays linear in the number of inputs
(the accumulator holds one grid; inputs are consumed one at a time).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError
from .grid import LabelGrid, ProbGrid, require_same_spec


@dataclass(frozen=True)
class EnsembleWeights:
    """Positive per-model weights; normalized to sum 1 before use."""

    weights: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.weights:
            raise ValidationError("weights must be non-empty")
        if any(w <= 0 for w in self.weights):
            raise ValidationError(f"weights must all be > 0, got {self.weights}")

    def __len__(self) -> int:
        return len(self.weights)

    def normalized(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()

    @classmethod
    def uniform(cls, n: int) -> "EnsembleWeights":
        return cls((1.0,) * n)


WeightsLike = Union[EnsembleWeights, Sequence[float]]


def _as_weights(w: WeightsLike) -> EnsembleWeights:
    return w if isinstance(w, EnsembleWeights) else EnsembleWeights(tuple(w))


def weighted_average(grids: Sequence[ProbGrid], w: WeightsLike) -> ProbGrid:
    """Convex combination of probability grids under normalized weights."""
    weights = _as_weights(w)
    if not grids:
        raise ValidationError("weighted_average needs at least one grid")
    if len(grids) != len(weights):
        raise ValidationError(
            f"{len(grids)} grids but {len(weights)} weights"
        )
    spec = require_same_spec(*grids)
    norm = weights.normalized()
    acc = norm[0] * grids[0].probs
    for wi, g in zip(norm[1:], grids[1:]):
        acc += wi * g.probs
    return ProbGrid(spec, acc)


def max_prob_fuse(grids: Sequence[ProbGrid]) -> ProbGrid:
    """Per voxel, copies the whole distribution of the most confident model.

    Confidence is the model's maximum class probability at that voxel; ties
    go to the lowest model index. Copying the full distribution (rather than
    a per-class max) keeps the output normalized.
    """
    if not grids:
        raise ValidationError("max_prob_fuse needs at least one grid")
    spec = require_same_spec(*grids)
    ncls = spec.num_classes
    # (n_models, n_voxels) peak confidence table; argmax picks the first
    # (lowest-index) model on ties.
    peaks = np.stack([g.probs.reshape(-1, ncls).max(axis=1) for g in grids])
    winner = np.argmax(peaks, axis=0)
    out = np.empty((spec.n_voxels, ncls), dtype=np.float64)
    for i, g in enumerate(grids):
        sel = winner == i
        if np.any(sel):
            out[sel] = g.probs.reshape(-1, ncls)[sel]
    return ProbGrid(spec, out)


def vote_fuse(grids: Sequence[ProbGrid]) -> LabelGrid:
    """Per voxel, each model votes for its argmax label; most votes wins.

    Both tie-breaks (a model's argmax tie and a vote-count tie) resolve to
    the lowest class index.
    """
    if not grids:
        raise ValidationError("vote_fuse needs at least one grid")
    spec = require_same_spec(*grids)
    ncls = spec.num_classes
    tallies = np.zeros((spec.n_voxels, ncls), dtype=np.int64)
    rows = np.arange(spec.n_voxels)
    for g in grids:
        votes = np.argmax(g.probs.reshape(-1, ncls), axis=1)
        tallies[rows, votes] += 1
    winners = np.argmax(tallies, axis=1).astype(np.uint8)
    return LabelGrid(spec, winners)
