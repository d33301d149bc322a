"""Volume container, overlapping patch grids, intensity normalization and the
VXV1 raw-volume file format."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

Dims = tuple[int, int, int]


class Unit(IntEnum):
    SUV = 0
    NORMALIZED = 1
    ARBITRARY = 2


@dataclass(frozen=True)
class Volume:
    """Immutable dense 3D scalar grid, indexed (depth, height, width).

    The array is stored as float64 and marked read-only, so a Volume can be
    shared freely between threads.
    """

    data: np.ndarray
    unit: Unit = Unit.ARBITRARY
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("volume contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "unit", Unit(self.unit))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray, **meta) -> "Volume":
        return Volume(data, self.unit, {**self.meta, **meta})

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.unit == other.unit and np.array_equal(self.data, other.data)

    __hash__ = None


# ---------------------------------------------------------------- patching


@dataclass(frozen=True)
class PatchGrid:
    patch_size: Dims
    stride: Dims
    origins: tuple[Dims, ...]
    dims: Dims

    def __post_init__(self):
        if any(s > p or s < 1 for s, p in zip(self.stride, self.patch_size)):
            raise ShapeError(f"stride {self.stride} must be in [1, patch_size {self.patch_size}]")

    def __len__(self):
        return len(self.origins)

    def slices(self, origin: Dims) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_size))


def _as_triple(value, name: str) -> Dims:
    if np.isscalar(value):
        return (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"{name} must have 3 components, got {value}")
    return value


def axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Patch start offsets along one axis; the last one is clamped to dim - patch."""
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def make_grid(dims, patch_size, overlap=0) -> PatchGrid:
    dims = _as_triple(dims, "dims")
    patch_size = _as_triple(patch_size, "patch_size")
    overlap = _as_triple(overlap, "overlap")
    for d, p, o in zip(dims, patch_size, overlap):
        if p < 1 or p > d:
            raise ShapeError(f"patch size {patch_size} does not fit volume {dims}")
        if not 0 <= o < p:
            raise ShapeError(f"overlap {overlap} must satisfy 0 <= overlap < patch {patch_size}")
    stride = tuple(p - o for p, o in zip(patch_size, overlap))
    per_axis = [axis_origins(d, p, s) for d, p, s in zip(dims, patch_size, stride)]
    origins = tuple(itertools.product(*per_axis))
    return PatchGrid(patch_size, stride, origins, dims)


def extract_patches(vol: Volume, patch_size, overlap=0) -> tuple[PatchGrid, list[Volume]]:
    """Cut `vol` into overlapping patches in ascending lexicographic origin order."""
    grid = make_grid(vol.dims, patch_size, overlap)
    patches = [Volume(vol.data[grid.slices(o)], vol.unit) for o in grid.origins]
    return grid, patches


def blend_window(patch_size) -> np.ndarray:
    """Separable raised-cosine weights, strictly positive (>= 0.05) everywhere."""
    axes = []
    for n in _as_triple(patch_size, "patch_size"):
        i = np.arange(n)
        i = np.minimum(i, n - 1 - i).astype(np.float64)  # mirror so the window is exactly symmetric
        axes.append(0.05 + 0.95 * np.sin(np.pi * (i + 0.5) / n) ** 2)
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def stitch_patches(grid: PatchGrid, patches: Sequence, out_dims=None) -> Volume:
    """Weight-normalized blend of patches back onto the full grid.

    `patches` may hold Volumes or plain arrays of shape `grid.patch_size`.
    """
    out_dims = grid.dims if out_dims is None else _as_triple(out_dims, "out_dims")
    if len(patches) != len(grid.origins):
        raise ShapeError(f"grid has {len(grid.origins)} origins but {len(patches)} patches given")
    window = blend_window(grid.patch_size)
    acc = np.zeros(out_dims)
    wsum = np.zeros(out_dims)
    unit = Unit.ARBITRARY
    for origin, patch in zip(grid.origins, patches):
        if isinstance(patch, Volume):
            unit = patch.unit
            patch = patch.data
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape != grid.patch_size:
            raise ShapeError(f"patch shape {patch.shape} != grid patch size {grid.patch_size}")
        sl = grid.slices(origin)
        if any(s.stop > d for s, d in zip(sl, out_dims)):
            raise ShapeError(f"patch at {origin} exceeds output dims {out_dims}")
        acc[sl] += window * patch
        wsum[sl] += window
    if np.any(wsum == 0):
        raise ShapeError("stitch grid leaves voxels uncovered")
    return Volume(acc / wsum, unit)


# ----------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormStats:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.hi <= self.lo:
            raise ParameterError(f"normalization needs hi > lo, got lo={self.lo}, hi={self.hi}")

    @classmethod
    def from_reference(cls, volumes: Sequence[Volume], percentile: float = 99.5) -> "NormStats":
        values = np.concatenate([v.data.ravel() for v in volumes])
        return cls(0.0, float(np.percentile(values, percentile)))


def normalize(vol: Volume, stats: NormStats) -> Volume:
    """Clip to [lo, hi] and map affinely onto [-1, 1]."""
    data = vol.data
    n_low = int(np.count_nonzero(data < stats.lo))
    n_high = int(np.count_nonzero(data > stats.hi))
    clipped = np.clip(data, stats.lo, stats.hi)
    scaled = 2.0 * (clipped - stats.lo) / (stats.hi - stats.lo) - 1.0
    meta = {"norm_lo": stats.lo, "norm_hi": stats.hi, "clipped_low": n_low, "clipped_high": n_high}
    return Volume(scaled, Unit.NORMALIZED, meta)


def denormalize(vol: Volume, stats: NormStats, unit: Unit = Unit.SUV) -> Volume:
    data = (vol.data + 1.0) * 0.5 * (stats.hi - stats.lo) + stats.lo
    return Volume(data, unit)


# -------------------------------------------------------------- VXV1 format

MAGIC = b"VXV1"
_HEADER = struct.Struct("<4s3IB")
# Refuse anything larger than 2**31 voxels (8 GiB of payload).
MAX_VOXELS = 2**31


def encode_volume(vol: Volume) -> bytes:
    d, h, w = vol.dims
    header = _HEADER.pack(MAGIC, d, h, w, int(vol.unit))
    return header + vol.data.astype("<f4").tobytes(order="C")


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    magic, d, h, w, unit = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if min(d, h, w) == 0:
        raise FormatError(f"zero dimension in header: {(d, h, w)}")
    n = d * h * w
    if n > MAX_VOXELS:
        raise FormatError(f"dims {(d, h, w)} overflow the {MAX_VOXELS}-voxel limit")
    try:
        unit = Unit(unit)
    except ValueError:
        raise FormatError(f"unknown unit tag {unit}") from None
    payload = memoryview(buf)[_HEADER.size:]
    if len(payload) != 4 * n:
        kind = "truncated" if len(payload) < 4 * n else "oversized"
        raise FormatError(f"{kind} payload: {len(payload)} bytes for {n} voxels")
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    if not np.all(np.isfinite(data)):
        raise FormatError("payload contains non-finite values")
    return Volume(data.astype(np.float64), unit)


def write_volume(vol: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())
