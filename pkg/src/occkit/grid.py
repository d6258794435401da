"""Voxel volume geometry plus the dense grid types shared by every module.

The canonical linear layout is x-major, then y, then z: linear index
``(x * ny + y) * nz + z``. A C-ordered numpy array of shape ``(nx, ny, nz)``
has exactly this layout, so grids are stored shaped and ``ravel()`` yields
the canonical order. Cells are half-open boxes
``[origin + i * s, origin + (i + 1) * s)``; points on the upper volume
boundary fall outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, SpecMismatchError, ValidationError


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel volume.

    Attributes:
        dims: (nx, ny, nz) voxel counts, each >= 1.
        voxel_size: isotropic edge length in meters, > 0.
        origin: (x0, y0, z0) minimum corner of the volume in meters.
        num_classes: semantic label count including the free class.
    """

    dims: Tuple[int, int, int]
    voxel_size: float
    origin: Tuple[float, float, float]
    num_classes: int

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) != d or d < 1 for d in self.dims):
            raise ValidationError(f"dims must be three positive integers, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValidationError(f"voxel_size must be > 0, got {self.voxel_size}")
        if len(self.origin) != 3:
            raise ValidationError(f"origin must have three components, got {self.origin}")
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def free_label(self) -> int:
        """Class id of empty space; pinned to the last class."""
        return self.num_classes - 1

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def upper_corner(self) -> Tuple[float, float, float]:
        """Exclusive maximum corner: origin + dims * voxel_size per axis."""
        return tuple(o + d * self.voxel_size for o, d in zip(self.origin, self.dims))

    def voxel_index(self, coords: Sequence[int]) -> int:
        """Linear index of voxel (x, y, z); raises IndexError when out of range."""
        x, y, z = coords
        nx, ny, nz = self.dims
        if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
            raise IndexError(f"voxel {(x, y, z)} outside grid dims {self.dims}")
        return (x * ny + y) * nz + z

    def voxel_coords(self, index: int) -> Tuple[int, int, int]:
        """Inverse of voxel_index."""
        nx, ny, nz = self.dims
        if not 0 <= index < self.n_voxels:
            raise IndexError(f"linear index {index} outside [0, {self.n_voxels})")
        z = index % nz
        rest = index // nz
        return rest // ny, rest % ny, z

    def world_to_voxel(self, point: Sequence[float]) -> Optional[Tuple[int, int, int]]:
        """Voxel containing a world point, or None when outside the volume."""
        idx = []
        for p, o, d in zip(point, self.origin, self.dims):
            i = int(np.floor((p - o) / self.voxel_size))
            if not 0 <= i < d:
                return None
            idx.append(i)
        return tuple(idx)

    def world_to_voxel_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized world_to_voxel.

        Args:
            points: (n, 3) array of world coordinates.

        Returns:
            (coords, inside): (n, 3) int voxel coordinates (valid only where
            inside) and an (n,) boolean mask of in-volume points.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        coords = np.floor((pts - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)
        inside = np.all((coords >= 0) & (coords < np.asarray(self.dims)), axis=1)
        return coords, inside

    def voxel_center(self, coords: Sequence[int]) -> Tuple[float, float, float]:
        return tuple(
            o + (c + 0.5) * self.voxel_size for o, c in zip(self.origin, coords)
        )


#: Challenge geometry: 80 m x 80 m x 6.4 m volume around the ego vehicle,
#: 0.4 m voxels, 17 semantic classes plus free. The extent closes exactly in
#: float64: origin + dims * voxel_size == (40.0, 40.0, 5.4).
DEFAULT_GRID_SPEC = GridSpec(
    dims=(200, 200, 16),
    voxel_size=0.4,
    origin=(-40.0, -40.0, -1.0),
    num_classes=18,
)

#: nuScenes-lidarseg semantic names in label order, plus the free class.
NUSCENES_CLASS_NAMES = (
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction vehicle",
    "motorcycle",
    "pedestrian",
    "traffic cone",
    "trailer",
    "truck",
    "driveable surface",
    "other flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
)


@dataclass(frozen=True)
class ClassTable:
    """Ordered class names; index == class id."""

    names: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name {name!r}") from None


DEFAULT_CLASS_TABLE = ClassTable(NUSCENES_CLASS_NAMES)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LabelGrid:
    """Dense per-voxel semantic labels, shaped (nx, ny, nz), dtype uint8."""

    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.size != self.spec.n_voxels:
            raise ShapeError(
                f"label grid has {arr.size} entries, spec wants {self.spec.n_voxels}"
            )
        if self.spec.num_classes > 256:
            raise ValidationError("label grids support at most 256 classes (u8 payload)")
        arr = arr.reshape(self.spec.dims)
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr != np.floor(arr)):
                raise ValidationError("labels must be non-negative integers")
            arr = arr.astype(np.uint8)
        if np.any(arr >= self.spec.num_classes):
            bad = int(np.argmax(arr.ravel() >= self.spec.num_classes))
            raise ValidationError(
                f"label {int(arr.ravel()[bad])} at voxel {bad} is >= num_classes "
                f"{self.spec.num_classes}"
            )
        object.__setattr__(self, "labels", _freeze(arr))


@dataclass(frozen=True)
class ProbGrid:
    """Dense per-voxel class distributions, shaped (nx, ny, nz, num_classes).

    Entries are float64, non-negative, and each voxel's distribution sums to
    one within 1e-6 (the construction tolerance; file readers renormalize
    exactly after validating).
    """

    NORM_TOL = 1e-6

    spec: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        shape = self.spec.dims + (self.spec.num_classes,)
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.size != self.spec.n_voxels * self.spec.num_classes:
            raise ShapeError(
                f"prob grid has {arr.size} entries, spec wants "
                f"{self.spec.n_voxels * self.spec.num_classes}"
            )
        arr = arr.reshape(shape)
        flat = arr.reshape(-1, self.spec.num_classes)
        neg = flat.min(axis=1)
        if np.any(neg < 0):
            v = int(np.argmax(neg < 0))
            raise ValidationError(f"negative probability at voxel {v}")
        sums = flat.sum(axis=1)
        err = np.abs(sums - 1.0)
        if np.any(err > self.NORM_TOL):
            v = int(np.argmax(err > self.NORM_TOL))
            raise ValidationError(
                f"voxel {v} distribution sums to {sums[v]:.9f}, "
                f"outside 1 +/- {self.NORM_TOL}"
            )
        object.__setattr__(self, "probs", _freeze(arr))


@dataclass(frozen=True)
class VoxelMask:
    """Dense boolean evaluation mask, shaped (nx, ny, nz). True = scored."""

    spec: GridSpec
    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.size != self.spec.n_voxels:
            raise ShapeError(
                f"mask has {arr.size} entries, spec wants {self.spec.n_voxels}"
            )
        if arr.dtype != np.bool_:
            bad = (arr != 0) & (arr != 1)
            if np.any(bad):
                v = int(np.argmax(bad.ravel()))
                raise ValidationError(f"mask value at voxel {v} is not 0 or 1")
            arr = arr.astype(np.bool_)
        object.__setattr__(self, "bits", _freeze(arr.reshape(self.spec.dims)))

    @classmethod
    def full(cls, spec: GridSpec) -> "VoxelMask":
        return cls(spec, np.ones(spec.dims, dtype=np.bool_))


def require_same_spec(*grids) -> GridSpec:
    """Returns the shared GridSpec or raises SpecMismatchError."""
    spec = grids[0].spec
    for g in grids[1:]:
        if g.spec != spec:
            raise SpecMismatchError(f"spec mismatch: {g.spec} != {spec}")
    return spec


def argmax_labels(p: ProbGrid) -> LabelGrid:
    """Per-voxel argmax with ties broken toward the lowest class index."""
    # np.argmax returns the first maximum, which is exactly the documented
    # lowest-index tie-break.
    labels = np.argmax(p.probs, axis=-1).astype(np.uint8)
    return LabelGrid(p.spec, labels)
