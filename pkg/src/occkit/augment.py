"""Cutout augmentation for multi-camera image sets.

The hole sampler is pinned to splitmix64 so outputs are bit-identical
across runs, platforms, and languages. Image i, hole k draws from the
stream seeded with ``seed XOR (i * 0x9E3779B97F4A7C15 mod 2**64)``,
advanced k steps; the next two outputs give the hole center
(cy = out mod h, cx = out mod w). Seed mixing is per image, never
sequential across images, so dropping one image leaves the others'
holes unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64_next(state: int) -> Tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


@dataclass(frozen=True)
class ImageSet:
    """Dense multi-camera image batch shaped (n, h, w, ch), float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or any(d < 1 for d in arr.shape):
            raise ValidationError(
                f"image set must be (n, h, w, ch) with all dims >= 1, got {arr.shape}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def ch(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class CutoutSpec:
    """Hole count, geometry, fill value, and sampler seed.

    hole_h / hole_w of None default to a quarter of the image dimension
    (at least one pixel) when the spec is applied.
    """

    seed: int
    num_holes: int = 1
    hole_h: Optional[int] = None
    hole_w: Optional[int] = None
    fill: float = 0.0

    def __post_init__(self):
        if self.num_holes < 0:
            raise ValidationError(f"num_holes must be >= 0, got {self.num_holes}")
        for name, v in (("hole_h", self.hole_h), ("hole_w", self.hole_w)):
            if v is not None and v < 1:
                raise ValidationError(f"{name} must be >= 1, got {v}")
        if not 0 <= self.seed <= _MASK64:
            raise ValidationError("seed must be an unsigned 64-bit value")

    def resolved_hole(self, h: int, w: int) -> Tuple[int, int]:
        hole_h = self.hole_h if self.hole_h is not None else max(1, h // 4)
        hole_w = self.hole_w if self.hole_w is not None else max(1, w // 4)
        return hole_h, hole_w


def sample_hole_center(
    seed: int, image_index: int, hole_index: int, h: int, w: int
) -> Tuple[int, int]:
    """(cy, cx) for one hole, per the documented splitmix64 mixing."""
    state = (seed ^ ((image_index * _GOLDEN) & _MASK64)) & _MASK64
    for _ in range(hole_index):
        state, _ = _splitmix64_next(state)
    state, out = _splitmix64_next(state)
    cy = out % h
    state, out = _splitmix64_next(state)
    cx = out % w
    return cy, cx


def cutout(imgs: ImageSet, spec: CutoutSpec) -> ImageSet:
    """Masks sampled rectangles to the fill value, per image.

    Hole k of image i is centered at sample_hole_center(seed, i, k, h, w)
    and covers rows [cy - hole_h//2, cy - hole_h//2 + hole_h) by the
    analogous columns, clipped to the image. Pixels outside every hole are
    bit-identical to the input.
    """
    out = imgs.data.copy()
    hole_h, hole_w = spec.resolved_hole(imgs.h, imgs.w)
    for i in range(imgs.n):
        for k in range(spec.num_holes):
            cy, cx = sample_hole_center(spec.seed, i, k, imgs.h, imgs.w)
            r0 = max(0, cy - hole_h // 2)
            r1 = min(imgs.h, cy - hole_h // 2 + hole_h)
            c0 = max(0, cx - hole_w // 2)
            c1 = min(imgs.w, cx - hole_w // 2 + hole_w)
            out[i, r0:r1, c0:c1, :] = spec.fill
    return ImageSet(out)
