"""Reading and writing every external format.

OCCK v1 container layout (all integers and reals little-endian):

    bytes 0-3   magic ASCII "OCCK"
    byte  4     version, currently 1
    byte  5     payload kind: 1 labels u8, 2 probs f64, 3 mask u8 (0/1),
                4 named-tensor archive, 5 image set f64
    bytes 6-7   reserved, zero
    bytes 8-23  u32 nx, ny, nz, num_classes
                (kind 5 reuses the slots as n, h, w, ch; kind 4 zeros them)
    bytes 24-55 f64 voxel_size, x0, y0, z0 (zero for kinds 4 and 5)
    bytes 56-   payload in canonical linear order (probs voxel-major then
                class; archives are a sequence of
                [u16 name length, name bytes, u32 rank, u32 dims..., f64 data])

Writes go to a temporary file in the target directory and are renamed into
place, so readers never observe a half-written grid. Probability grids are
validated against the 1e-6 normalization tolerance on read and then
renormalized exactly in memory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import CutoutSpec, ImageSet
from .det2occ import (
    DEFAULT_SCORE_THRESHOLD,
    DEFAULT_SPACING_T,
    ConversionConfig,
    DetectionBox,
)
from .ensemble import EnsembleWeights
from .errors import FormatError, ValidationError
from .grid import (
    DEFAULT_CLASS_TABLE,
    DEFAULT_GRID_SPEC,
    ClassTable,
    GridSpec,
    LabelGrid,
    ProbGrid,
    VoxelMask,
)
from .head import HeadParams, named_parameters

MAGIC = b"OCCK"
FORMAT_VERSION = 1

KIND_LABELS = 1
KIND_PROBS = 2
KIND_MASK = 3
KIND_TENSORS = 4
KIND_IMAGES = 5

_HEADER = struct.Struct("<4sBBH4I4d")
HEADER_SIZE = _HEADER.size  # 56

Grid = Union[LabelGrid, ProbGrid, VoxelMask]


def atomic_write(path, writer) -> None:
    """Writes via `writer(file)` to a temp file, then renames into place."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _pack_header(kind: int, ints: Tuple[int, int, int, int], reals) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, kind, 0, *ints, *reals)


def _grid_header(kind: int, spec: GridSpec) -> bytes:
    nx, ny, nz = spec.dims
    return _pack_header(
        kind, (nx, ny, nz, spec.num_classes), (spec.voxel_size, *spec.origin)
    )


def write_grid(path, grid: Grid) -> None:
    """Serializes a label grid, probability grid, or mask."""
    if isinstance(grid, LabelGrid):
        kind, payload = KIND_LABELS, np.ascontiguousarray(grid.labels, dtype=np.uint8)
    elif isinstance(grid, ProbGrid):
        kind, payload = KIND_PROBS, np.ascontiguousarray(grid.probs, dtype="<f8")
    elif isinstance(grid, VoxelMask):
        kind, payload = KIND_MASK, grid.bits.astype(np.uint8)
    else:
        raise ValidationError(f"cannot serialize {type(grid).__name__} as a grid")

    def writer(f):
        f.write(_grid_header(kind, grid.spec))
        payload.tofile(f)

    atomic_write(path, writer)


def _read_header(data: bytes, path) -> Tuple[int, Tuple[int, ...], Tuple[float, ...]]:
    if len(data) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, kind, reserved, nx, ny, nz, ncls, vs, x0, y0, z0 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if kind not in (KIND_LABELS, KIND_PROBS, KIND_MASK, KIND_TENSORS, KIND_IMAGES):
        raise FormatError(f"{path}: unknown payload kind {kind}", offset=5)
    if reserved != 0:
        raise FormatError(f"{path}: reserved bytes must be zero", offset=6)
    return kind, (nx, ny, nz, ncls), (vs, x0, y0, z0)


def _payload(data: bytes, expected: int, path) -> bytes:
    actual = len(data) - HEADER_SIZE
    if actual != expected:
        raise FormatError(
            f"{path}: expected {expected} payload bytes, found {actual}",
            offset=HEADER_SIZE,
        )
    return data[HEADER_SIZE:]


def read_grid(path) -> Grid:
    """Decodes a grid payload (kinds 1-3), enforcing every type invariant.

    Probability grids are renormalized exactly after the tolerance check, so
    in-memory distributions sum to one to machine precision.
    """
    data = Path(path).read_bytes()
    kind, (nx, ny, nz, ncls), (vs, x0, y0, z0) = _read_header(data, path)
    if kind in (KIND_TENSORS, KIND_IMAGES):
        other = "read_tensors" if kind == KIND_TENSORS else "read_image_set"
        raise FormatError(f"{path}: payload kind {kind} is not a grid; use {other}()", offset=5)
    spec = GridSpec(dims=(nx, ny, nz), voxel_size=vs, origin=(x0, y0, z0), num_classes=ncls)
    if kind == KIND_LABELS:
        raw = _payload(data, spec.n_voxels, path)
        return LabelGrid(spec, np.frombuffer(raw, dtype=np.uint8))
    if kind == KIND_MASK:
        raw = _payload(data, spec.n_voxels, path)
        return VoxelMask(spec, np.frombuffer(raw, dtype=np.uint8))
    raw = _payload(data, spec.n_voxels * ncls * 8, path)
    grid = ProbGrid(spec, np.frombuffer(raw, dtype="<f8"))
    flat = grid.probs.reshape(-1, ncls)
    return ProbGrid(spec, flat / flat.sum(axis=1, keepdims=True))


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    """Named-tensor archive (payload kind 4), entries in dict order."""
    def writer(f):
        f.write(_pack_header(KIND_TENSORS, (0, 0, 0, 0), (0.0, 0.0, 0.0, 0.0)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            arr.tofile(f)

    atomic_write(path, writer)


def read_tensors(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    kind, _, _ = _read_header(data, path)
    if kind != KIND_TENSORS:
        raise FormatError(f"{path}: payload kind {kind} is not a tensor archive", offset=5)
    out: Dict[str, np.ndarray] = {}
    pos = HEADER_SIZE

    def need(n, what):
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated {what}", offset=pos)

    while pos < len(data):
        need(2, "tensor name length")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(name_len, "tensor name")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(4, "tensor rank")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(4 * rank, "tensor dims")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        need(8 * count, f"tensor {name!r} data")
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out


_META_NAME = "meta.mlp_output"
_LOSS_NAME = "loss.weights"


def write_head_params(path, params: HeadParams) -> None:
    """HeadParams as a named-tensor archive, round-trip exact."""
    tensors = dict(named_parameters(params))
    tensors[_META_NAME] = np.array([params.depth, params.voxel_channels], dtype=np.float64)
    tensors[_LOSS_NAME] = np.array(params.loss_weights, dtype=np.float64)
    write_tensors(path, tensors)


def read_head_params(path) -> HeadParams:
    t = read_tensors(path)
    try:
        depth, voxel_channels = (int(v) for v in t[_META_NAME])
        lam_ce, lam_dice = (float(v) for v in t[_LOSS_NAME])
        return HeadParams(
            w1=t["mlp.w1"],
            b1=t["mlp.b1"],
            w2=t["mlp.w2"],
            b2=t["mlp.b2"],
            depth=depth,
            voxel_channels=voxel_channels,
            enc_kernels=[t[f"enc{i}.kernel"] for i in range(3)],
            enc_biases=[t[f"enc{i}.bias"] for i in range(3)],
            dec_kernels=[t[f"dec{i}.kernel"] for i in range(3)],
            dec_biases=[t[f"dec{i}.bias"] for i in range(3)],
            w_cls=t["cls.weight"],
            b_cls=t["cls.bias"],
            loss_weights=(lam_ce, lam_dice),
        )
    except KeyError as e:
        raise FormatError(f"{path}: head archive is missing tensor {e.args[0]!r}") from None


def write_image_set(path, imgs: ImageSet) -> None:
    """Image set (payload kind 5); header ints carry (n, h, w, ch)."""
    def writer(f):
        f.write(_pack_header(KIND_IMAGES, imgs.data.shape, (0.0, 0.0, 0.0, 0.0)))
        np.ascontiguousarray(imgs.data, dtype="<f8").tofile(f)

    atomic_write(path, writer)


def read_image_set(path) -> ImageSet:
    data = Path(path).read_bytes()
    kind, shape, _ = _read_header(data, path)
    if kind != KIND_IMAGES:
        raise FormatError(f"{path}: payload kind {kind} is not an image set", offset=5)
    n, h, w, ch = shape
    raw = _payload(data, n * h * w * ch * 8, path)
    return ImageSet(np.frombuffer(raw, dtype="<f8").reshape(n, h, w, ch))


# ---------------------------------------------------------------------------
# detection boxes (JSON lines)
# ---------------------------------------------------------------------------

_BOX_KEYS = ("center", "size", "yaw", "class_id", "score")


def read_boxes(path) -> List[DetectionBox]:
    """One JSON box per non-empty line; errors carry the 1-based line number."""
    boxes = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: line {lineno}: expected a JSON object")
            missing = [k for k in _BOX_KEYS if k not in obj]
            if missing:
                raise FormatError(f"{path}: line {lineno}: missing keys {missing}")
            try:
                boxes.append(
                    DetectionBox(
                        center=tuple(obj["center"]),
                        size=tuple(obj["size"]),
                        yaw=obj["yaw"],
                        class_id=int(obj["class_id"]),
                        score=float(obj["score"]),
                    )
                )
            except (TypeError, ValueError) as e:
                raise FormatError(f"{path}: line {lineno}: {e}") from None
            except ValidationError as e:
                raise ValidationError(f"{path}: line {lineno}: {e}") from None
    return boxes


def write_boxes(path, boxes: Sequence[DetectionBox]) -> None:
    def writer(f):
        for b in boxes:
            f.write(
                json.dumps(
                    {
                        "center": list(b.center),
                        "size": list(b.size),
                        "yaw": b.yaw,
                        "class_id": b.class_id,
                        "score": b.score,
                    }
                ).encode("utf-8")
            )
            f.write(b"\n")

    atomic_write(path, writer)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def parse_thresholds(
    value, num_classes: int, table: ClassTable = DEFAULT_CLASS_TABLE
) -> Tuple[float, ...]:
    """Per-class thresholds from a JSON value.

    Accepts a plain list of num_classes - 1 floats, or an object
    {"default": f, "per_class": {name-or-id: f}}.
    """
    nsem = num_classes - 1
    if isinstance(value, (list, tuple)):
        if len(value) != nsem:
            raise ValidationError(
                f"threshold list must have {nsem} entries, got {len(value)}"
            )
        return tuple(float(v) for v in value)
    if isinstance(value, dict):
        unknown = set(value) - {"default", "per_class"}
        if unknown:
            raise ValidationError(f"unknown threshold keys {sorted(unknown)}")
        out = [float(value.get("default", DEFAULT_SCORE_THRESHOLD))] * nsem
        for key, v in value.get("per_class", {}).items():
            cid = int(key) if str(key).lstrip("-").isdigit() else table.id_of(key)
            if not 0 <= cid < nsem:
                raise ValidationError(f"threshold for non-semantic class {key!r}")
            out[cid] = float(v)
        return tuple(out)
    raise ValidationError(f"cannot parse thresholds from {type(value).__name__}")


def parse_grid_spec(obj: dict) -> GridSpec:
    unknown = set(obj) - {"dims", "voxel_size", "origin", "num_classes"}
    if unknown:
        raise ValidationError(f"unknown grid keys {sorted(unknown)}")
    return GridSpec(
        dims=tuple(obj.get("dims", DEFAULT_GRID_SPEC.dims)),
        voxel_size=obj.get("voxel_size", DEFAULT_GRID_SPEC.voxel_size),
        origin=tuple(obj.get("origin", DEFAULT_GRID_SPEC.origin)),
        num_classes=obj.get("num_classes", DEFAULT_GRID_SPEC.num_classes),
    )


@dataclass(frozen=True)
class RunConfig:
    """Pipeline configuration; every field has a usable default.

    JSON schema (all keys optional):
        {"grid": {"dims", "voxel_size", "origin", "num_classes"},
         "ensemble": {"weights": [..], "strategy": "weighted|max|vote"},
         "det2occ": {"thresholds": <list | {"default", "per_class"}>,
                     "spacing_t": 0.2},
         "cutout": {"num_holes", "hole_h", "hole_w", "fill", "seed"},
         "loss": {"lambda_ce": 1.0, "lambda_dice": 1.0}}
    """

    grid: GridSpec = DEFAULT_GRID_SPEC
    weights: Optional[EnsembleWeights] = None  # None -> uniform
    strategy: str = "weighted"
    thresholds: Optional[Tuple[float, ...]] = None  # None -> 0.3 everywhere
    spacing_t: float = DEFAULT_SPACING_T
    cutout: CutoutSpec = field(default_factory=lambda: CutoutSpec(seed=42))
    loss_weights: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.strategy not in ("weighted", "max", "vote"):
            raise ValidationError(f"unknown ensemble strategy {self.strategy!r}")
        if self.thresholds is not None and len(self.thresholds) != self.grid.num_classes - 1:
            raise ValidationError(
                f"{len(self.thresholds)} thresholds for "
                f"{self.grid.num_classes - 1} semantic classes"
            )

    def conversion_config(self) -> ConversionConfig:
        if self.thresholds is not None:
            return ConversionConfig(self.thresholds, self.spacing_t)
        return ConversionConfig.uniform(self.grid.num_classes, spacing_t=self.spacing_t)

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - {"grid", "ensemble", "det2occ", "cutout", "loss"}
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        grid = parse_grid_spec(obj.get("grid", {}))
        ens = obj.get("ensemble", {})
        det = obj.get("det2occ", {})
        cut = obj.get("cutout", {})
        loss = obj.get("loss", {})
        thresholds = det.get("thresholds")
        return cls(
            grid=grid,
            weights=EnsembleWeights(tuple(ens["weights"])) if "weights" in ens else None,
            strategy=ens.get("strategy", "weighted"),
            thresholds=(
                parse_thresholds(thresholds, grid.num_classes)
                if thresholds is not None
                else None
            ),
            spacing_t=float(det.get("spacing_t", DEFAULT_SPACING_T)),
            cutout=CutoutSpec(
                seed=int(cut.get("seed", 42)),
                num_holes=int(cut.get("num_holes", 1)),
                hole_h=cut.get("hole_h"),
                hole_w=cut.get("hole_w"),
                fill=float(cut.get("fill", 0.0)),
            ),
            loss_weights=(
                float(loss.get("lambda_ce", 1.0)),
                float(loss.get("lambda_dice", 1.0)),
            ),
        )


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return RunConfig.from_json_dict(obj)
