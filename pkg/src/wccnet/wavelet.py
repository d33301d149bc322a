"""Single-level orthonormal 3D Haar transform and subband prior selection.

Band names use one letter per axis in (depth, height, width) order, L for the
low-pass filter and H for the high-pass filter along that axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ParameterError, ShapeError
from .volume import Volume

BAND_NAMES = tuple("".join(p) for p in itertools.product("LH", repeat=3))
_SQRT_HALF = np.sqrt(0.5)


@dataclass(frozen=True)
class SubbandSet:
    bands: Mapping[str, Volume]
    source_dims: tuple[int, int, int]

    def __post_init__(self):
        if set(self.bands) != set(BAND_NAMES):
            raise ShapeError(f"subband set needs exactly {BAND_NAMES}, got {sorted(self.bands)}")
        shapes = {v.dims for v in self.bands.values()}
        if len(shapes) != 1:
            raise ShapeError(f"subbands have inconsistent dims {shapes}")
        if any(s % 2 for s in self.source_dims):
            raise ShapeError(f"source dims {self.source_dims} must be even")
        half = tuple(s // 2 for s in self.source_dims)
        if shapes.pop() != half:
            raise ShapeError(f"subband dims do not match half of source dims {self.source_dims}")

    def __getitem__(self, name: str) -> Volume:
        return self.bands[name]

    def energy(self) -> float:
        return float(sum(np.sum(v.data**2) for v in self.bands.values()))


def _analyze(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    odd = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (even + odd) * _SQRT_HALF, (even - odd) * _SQRT_HALF


def _synthesize(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape)
    idx = [slice(None)] * 3
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = (lo + hi) * _SQRT_HALF
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = (lo - hi) * _SQRT_HALF
    return out


def haar_analysis(x: np.ndarray) -> dict[str, np.ndarray]:
    """Raw-array version of :func:`dwt3`."""
    if x.ndim != 3 or any(n % 2 for n in x.shape):
        raise ShapeError(f"dwt3 needs a 3D array with even dims, got {x.shape}")
    parts = {"": np.asarray(x, dtype=np.float64)}
    for axis in range(3):
        nxt = {}
        for key, arr in parts.items():
            lo, hi = _analyze(arr, axis)
            nxt[key + "L"] = lo
            nxt[key + "H"] = hi
        parts = nxt
    return parts


def haar_synthesis(bands: Mapping[str, np.ndarray]) -> np.ndarray:
    parts = dict(bands)
    for axis in (2, 1, 0):
        parts = {
            key: _synthesize(parts[key + "L"], parts[key + "H"], axis)
            for key in {k[:-1] for k in parts}
        }
    return parts[""]


def dwt3(vol: Volume) -> SubbandSet:
    """Single-level orthonormal Haar analysis; odd dims are rejected, not padded."""
    parts = haar_analysis(vol.data)
    return SubbandSet({k: Volume(v, vol.unit) for k, v in parts.items()}, vol.dims)


def idwt3(bands: SubbandSet) -> Volume:
    unit = bands["LLL"].unit
    return Volume(haar_synthesis({k: v.data for k, v in bands.bands.items()}), unit)


# ---------------------------------------------------------------- selectors

_PRESETS = {
    "LLL": ("LLL",),
    "HHH": ("HHH",),
    "AllHigh": tuple(b for b in BAND_NAMES if "H" in b),
    "AllLow": tuple(b for b in BAND_NAMES if b != "HHH"),
    "AllBands": BAND_NAMES,
}


@dataclass(frozen=True)
class SubbandSelector:
    """Which subbands feed the prior.

    `mode` is one of LLL, HHH, AllHigh, AllLow, AllBands or Custom; Custom
    requires an explicit non-empty `mask` of band names.
    """

    mode: str = "LLL"
    mask: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode == "Custom":
            mask = tuple(dict.fromkeys(self.mask))
            if not mask:
                raise ParameterError("custom subband selector must select at least one band")
            unknown = set(mask) - set(BAND_NAMES)
            if unknown:
                raise ParameterError(f"unknown subband names {sorted(unknown)}")
            object.__setattr__(self, "mask", tuple(b for b in BAND_NAMES if b in mask))
        elif self.mode in _PRESETS:
            object.__setattr__(self, "mask", _PRESETS[self.mode])
        else:
            raise ParameterError(f"unknown selector mode {self.mode!r}")

    @classmethod
    def parse(cls, text: str) -> "SubbandSelector":
        """Accept a preset name or a '+'-joined band list such as ``LLL+LLH``."""
        text = text.strip()
        for name in _PRESETS:
            if text.lower() == name.lower():
                return cls(name)
        return cls("Custom", tuple(p.strip().upper() for p in text.split("+") if p.strip()))

    @property
    def name(self) -> str:
        return self.mode if self.mode != "Custom" else "+".join(self.mask)


def select_prior(bands: SubbandSet, sel: SubbandSelector) -> Volume:
    """Voxel-wise mean of the selected subbands (one half-resolution volume)."""
    if not sel.mask:
        raise ParameterError("empty subband selection")
    total = np.zeros(bands["LLL"].dims)
    for name in sel.mask:
        total += bands[name].data
    return Volume(total / len(sel.mask), bands["LLL"].unit)


def stack_prior(bands: SubbandSet, sel: SubbandSelector) -> np.ndarray:
    """Channel-stacked alternative to :func:`select_prior`, shape (k, d/2, h/2, w/2)."""
    if not sel.mask:
        raise ParameterError("empty subband selection")
    return np.stack([bands[name].data for name in sel.mask])


def wavelet_prior(y: np.ndarray, sel: SubbandSelector, combine: str = "mean") -> np.ndarray:
    """Prior for a raw (d, h, w) array as a (channels, d/2, h/2, w/2) array."""
    parts = haar_analysis(y)
    if combine == "mean":
        return (sum(parts[b] for b in sel.mask) / len(sel.mask))[None]
    if combine == "stack":
        return np.stack([parts[b] for b in sel.mask])
    raise ParameterError(f"unknown prior combine mode {combine!r}")
