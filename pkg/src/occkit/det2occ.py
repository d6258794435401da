"""Converting 3D detection boxes into voxel occupancy.

Pipeline: drop boxes below their class score threshold, fill each survivor
with a centered point lattice of spacing t, map the points into the voxel
volume, and resolve multi-label voxels by highest score (ties: lowest class
id, then earliest box). The result can be lifted to a probability grid for
averaging with occupancy models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .grid import GridSpec, LabelGrid, ProbGrid

DEFAULT_SCORE_THRESHOLD = 0.3
DEFAULT_SPACING_T = 0.2  # meters; half the challenge voxel size


@dataclass(frozen=True)
class DetectionBox:
    """Upright oriented 3D box with a semantic class and confidence score.

    Attributes:
        center: (x, y, z) centroid in meters.
        size: (length, width, height); length runs along the heading axis
            at yaw = 0.
        yaw: counter-clockwise rotation about +z, radians.
        class_id: semantic (non-free) class id.
        score: detector confidence in [0, 1].
    """

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValidationError("center and size must have three components")
        if any(s <= 0 for s in self.size):
            raise ValidationError(f"box size must be positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must be in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class ConversionConfig:
    """Per-class score thresholds and the in-box lattice spacing."""

    thresholds: Tuple[float, ...]
    spacing_t: float = DEFAULT_SPACING_T

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValidationError("thresholds must lie in [0, 1]")
        if not self.spacing_t > 0:
            raise ValidationError(f"spacing_t must be > 0, got {self.spacing_t}")

    @classmethod
    def uniform(
        cls,
        num_classes: int,
        threshold: float = DEFAULT_SCORE_THRESHOLD,
        spacing_t: float = DEFAULT_SPACING_T,
    ) -> "ConversionConfig":
        """One threshold for all num_classes - 1 semantic classes."""
        return cls((threshold,) * (num_classes - 1), spacing_t)


def filter_boxes(
    boxes: Sequence[DetectionBox], cfg: ConversionConfig
) -> List[DetectionBox]:
    """Keeps boxes with score >= their class threshold, order preserved."""
    kept = []
    for b in boxes:
        if b.class_id >= len(cfg.thresholds):
            raise ValidationError(
                f"class_id {b.class_id} has no threshold "
                f"(semantic classes: {len(cfg.thresholds)})"
            )
        if b.score >= cfg.thresholds[b.class_id]:
            kept.append(b)
    return kept


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_to_points(box: DetectionBox, spacing_t: float) -> np.ndarray:
    """Centered point lattice filling the box, in world coordinates.

    Per axis d the lattice has n_d = max(1, floor(size_d / spacing_t))
    points at local offsets (k + 0.5) / n_d * size_d - size_d / 2, so every
    point is strictly interior and a box smaller than t collapses to its
    center.

    Returns:
        (n, 3) float64 array of world points.
    """
    if not spacing_t > 0:
        raise ValidationError(f"spacing_t must be > 0, got {spacing_t}")
    axes = []
    for size_d in box.size:
        n_d = max(1, math.floor(size_d / spacing_t))
        k = np.arange(n_d, dtype=np.float64)
        axes.append((k + 0.5) / n_d * size_d - size_d / 2.0)
    lx, ly, lz = np.meshgrid(*axes, indexing="ij")
    local = np.stack([lx.ravel(), ly.ravel(), lz.ravel()], axis=1)
    return local @ _yaw_matrix(box.yaw).T + np.asarray(box.center)


def point_in_box(p: Sequence[float], box: DetectionBox) -> bool:
    """Closed containment test: the box boundary counts as inside."""
    dx = p[0] - box.center[0]
    dy = p[1] - box.center[1]
    dz = p[2] - box.center[2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # rotate the offset by -yaw into the box frame
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    length, width, height = box.size
    return (
        abs(lx) <= length / 2.0
        and abs(ly) <= width / 2.0
        and abs(dz) <= height / 2.0
    )


def voxelize_boxes(
    boxes: Sequence[DetectionBox], spec: GridSpec, cfg: ConversionConfig
) -> Tuple[LabelGrid, np.ndarray]:
    """Rasterizes boxes into a label grid plus a per-voxel winning score.

    Boxes are threshold-filtered first. Every lattice point that lands in
    the volume marks its voxel with the box's class and score; conflicting
    claims resolve to the highest score, then lowest class id, then earliest
    box in the input order. Untouched voxels carry the free label and
    score 0.

    Returns:
        (labels, scores) with scores shaped like the grid dims.
    """
    if len(cfg.thresholds) != spec.num_classes - 1:
        raise ValidationError(
            f"{len(cfg.thresholds)} thresholds for {spec.num_classes - 1} "
            "semantic classes"
        )
    labels = np.full(spec.n_voxels, spec.free_label, dtype=np.int64)
    scores = np.zeros(spec.n_voxels, dtype=np.float64)
    nx, ny, nz = spec.dims
    for b in filter_boxes(boxes, cfg):
        coords, inside = spec.world_to_voxel_many(box_to_points(b, cfg.spacing_t))
        if not np.any(inside):
            continue
        c = coords[inside]
        lin = np.unique((c[:, 0] * ny + c[:, 1]) * nz + c[:, 2])
        # processed in input order, so on full ties the incumbent
        # (earliest box) survives
        better = (b.score > scores[lin]) | (
            (b.score == scores[lin]) & (b.class_id < labels[lin])
        )
        win = lin[better]
        labels[win] = b.class_id
        scores[win] = b.score
    return (
        LabelGrid(spec, labels.astype(np.uint8)),
        scores.reshape(spec.dims),
    )


def det_to_probgrid(labels: LabelGrid, scores: np.ndarray) -> ProbGrid:
    """Lifts rasterized boxes to per-voxel distributions.

    A voxel with semantic label c and winning score s becomes p(c) = s,
    p(free) = 1 - s; free voxels are one-hot on free. The free complement
    makes low-confidence boxes degrade gracefully under probability
    averaging.
    """
    spec = labels.spec
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size != spec.n_voxels:
        raise ValidationError(
            f"score grid has {s.size} entries, spec wants {spec.n_voxels}"
        )
    probs = np.zeros((spec.n_voxels, spec.num_classes), dtype=np.float64)
    lab = labels.labels.ravel().astype(np.int64)
    probs[:, spec.free_label] = 1.0
    sel = np.flatnonzero(lab != spec.free_label)
    probs[sel, lab[sel]] = s[sel]
    probs[sel, spec.free_label] = 1.0 - s[sel]
    return ProbGrid(spec, probs)


def boxes_to_probgrid(
    boxes: Sequence[DetectionBox], spec: GridSpec, cfg: ConversionConfig
) -> ProbGrid:
    """voxelize_boxes followed by det_to_probgrid."""
    return det_to_probgrid(*voxelize_boxes(boxes, spec, cfg))
