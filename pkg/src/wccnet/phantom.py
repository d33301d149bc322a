"""Synthetic uptake phantoms and count-statistics dose reduction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ParameterError
from .volume import Unit, Volume

DOSE_FRACTIONS = {"1/4": 0.25, "1/20": 0.05, "1/50": 0.02}


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    uptake: float


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    background: float = 1.0
    ellipsoids: tuple[Ellipsoid, ...] = ()
    bias_amplitude: float = 0.0
    seed: int = 0
    blur_sigma: float = 2.0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"bad phantom dims {self.dims}")
        if self.background < 0:
            raise ParameterError("background uptake must be >= 0")
        if not 0 <= self.bias_amplitude < 1:
            raise ParameterError("bias amplitude must lie in [0, 1)")
        if self.blur_sigma <= 0:
            raise ParameterError("blur sigma must be > 0")
        for e in self.ellipsoids:
            if e.uptake < 0:
                raise ParameterError(f"negative uptake {e.uptake}")
            if min(e.semi_axes) <= 0:
                raise ParameterError(f"semi-axes must be positive: {e.semi_axes}")
            for c, a, d in zip(e.center, e.semi_axes, self.dims):
                if c - a < -0.5 or c + a > d - 0.5:
                    raise ParameterError(f"ellipsoid {e} extends outside dims {self.dims}")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "background": self.background,
            "ellipsoids": [
                {"center": list(e.center), "semi_axes": list(e.semi_axes), "uptake": e.uptake}
                for e in self.ellipsoids
            ],
            "bias_amplitude": self.bias_amplitude,
            "seed": self.seed,
            "blur_sigma": self.blur_sigma,
        }

    @classmethod
    def from_dict(cls, d) -> "PhantomSpec":
        ells = tuple(Ellipsoid(tuple(e["center"]), tuple(e["semi_axes"]), e["uptake"]) for e in d.get("ellipsoids", []))
        return cls(tuple(d["dims"]), d.get("background", 1.0), ells, d.get("bias_amplitude", 0.0),
                   d.get("seed", 0), d.get("blur_sigma", 2.0))


def _soft_inside(grid, e: Ellipsoid, sigma: float) -> np.ndarray:
    """Smoothed indicator Phi(d / sigma) using the first-order signed distance
    -f / |grad f| of f = sum((x - c)^2 / a^2) - 1 (exactly 1 at the center)."""
    f = -1.0
    g2 = 0.0
    for x, c, a in zip(grid, e.center, e.semi_axes):
        f = f + (x - c) ** 2 / a**2
        g2 = g2 + ((x - c) / a**2) ** 2
    grad = 2.0 * np.sqrt(g2)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(grad > 0, -f / grad, np.inf)
    return ndtr(dist / sigma)


def bias_field(dims, amplitude: float, seed: int) -> np.ndarray:
    """1 + amplitude * product of half-period cosines with seeded phases."""
    if amplitude == 0:
        return np.ones(dims)
    rng = np.random.default_rng([seed, 7])
    phases = rng.uniform(0, 2 * np.pi, size=3)
    field_ = np.ones(dims)
    for axis, (n, ph) in enumerate(zip(dims, phases)):
        shape = [1, 1, 1]
        shape[axis] = n
        field_ = field_ * np.cos(np.pi * np.arange(n) / n + ph).reshape(shape)
    return 1.0 + amplitude * field_


def generate_phantom(spec: PhantomSpec) -> Volume:
    spec.validate()
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.dims], indexing="ij")
    vol = np.full(spec.dims, float(spec.background))
    for e in spec.ellipsoids:
        s = _soft_inside(grid, e, spec.blur_sigma)
        vol = vol * (1.0 - s) + e.uptake * s
    vol = vol * bias_field(spec.dims, spec.bias_amplitude, spec.seed)
    return Volume(vol, Unit.SUV, {"seed": spec.seed})


def random_phantom_spec(dims, seed: int, n_range=(3, 6), uptake_range=(0.2, 6.0),
                        bias_amplitude: float = 0.15, blur_sigma: float = 2.0) -> PhantomSpec:
    """Random ellipsoid phantom fully contained in `dims`, reproducible from `seed`."""
    rng = np.random.default_rng([seed, 3])
    dims = tuple(int(d) for d in dims)
    ells = []
    for _ in range(int(rng.integers(n_range[0], n_range[1] + 1))):
        axes = tuple(float(rng.uniform(d / 10, d / 3.5)) for d in dims)
        center = tuple(float(rng.uniform(a - 0.5, d - 0.5 - a)) for a, d in zip(axes, dims))
        ells.append(Ellipsoid(center, axes, float(rng.uniform(*uptake_range))))
    return PhantomSpec(dims, 1.0, tuple(ells), bias_amplitude, seed, blur_sigma)


def simulate_low_dose(vol: Volume, dose_fraction: float, counts_per_unit: float, seed: int,
                      model: str = "poisson") -> Volume:
    """Scaled count noise: k ~ Poisson(vol * dose * cpu), returned as k / (dose * cpu).

    ``model="gaussian"`` swaps in zero-mean Gaussian noise of the same variance.
    """
    if not 0 < dose_fraction <= 1:
        raise ParameterError(f"dose fraction must lie in (0, 1], got {dose_fraction}")
    if counts_per_unit <= 0:
        raise ParameterError("counts_per_unit must be > 0")
    if np.any(vol.data < 0):
        raise ParameterError("low-dose simulation needs a non-negative volume")
    scale = dose_fraction * counts_per_unit
    rng = np.random.default_rng([seed, 11])
    if model == "poisson":
        out = rng.poisson(vol.data * scale) / scale
    elif model == "gaussian":
        out = vol.data + rng.standard_normal(vol.dims) * np.sqrt(vol.data / scale)
    else:
        raise ParameterError(f"unknown noise model {model!r}")
    return Volume(out, vol.unit, {"dose_fraction": dose_fraction, "counts_per_unit": counts_per_unit, "seed": seed})
