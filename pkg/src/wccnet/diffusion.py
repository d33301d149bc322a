"""DDPM noise schedule, forward corruption, epsilon-prediction loss and
ancestral sampling.

Arrays follow the network layout (B, 1, D, H, W); timesteps are 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import NumericError, ParameterError, ShapeError
from .network import autograd as ag
from .volume import Volume

REFERENCE_T = 1000
REFERENCE_BETA_MIN = 1e-4
REFERENCE_BETA_MAX = 2e-2
VARIANCES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    variance: str = "beta"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ParameterError("beta must be a non-empty 1D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ParameterError("every beta_t must lie in (0, 1)")
        if self.variance not in VARIANCES:
            raise ParameterError(f"variance must be one of {VARIANCES}, got {self.variance!r}")
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if np.any(t != np.round(t)):
                raise ParameterError(f"timesteps must be integers, got {t}")
            t = t.astype(np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"timestep outside [1, {self.T}]: {t}")
        return t

    def sigma(self, t: int) -> float:
        """Reverse-step noise scale; zero at t = 1."""
        t = int(self.check_t(t))
        if t == 1:
            return 0.0
        if self.variance == "beta":
            return math.sqrt(self.beta[t - 1])
        ab = self.alpha_bar
        return math.sqrt((1.0 - ab[t - 2]) / (1.0 - ab[t - 1]) * self.beta[t - 1])

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta], "variance": self.variance}

    @classmethod
    def from_dict(cls, d) -> "NoiseSchedule":
        return cls(np.array(d["beta"], dtype=np.float64), d.get("variance", "beta"))


def make_linear_schedule(T: int, beta_min: float, beta_max: float, variance: str = "beta") -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    if T == 1:
        return NoiseSchedule(np.array([beta_min]), variance)
    t = np.arange(1, T + 1, dtype=np.float64)
    return NoiseSchedule(beta_min + (t - 1) * (beta_max - beta_min) / (T - 1), variance)


def rescaled_endpoints(T: int) -> tuple[float, float]:
    """Linear-schedule endpoints for a short chain with the same final alpha_bar
    as the 1000-step 1e-4..2e-2 schedule: beta_min scales by 1000/T and
    beta_max is solved for."""
    target = np.sum(np.log1p(-make_linear_schedule(REFERENCE_T, REFERENCE_BETA_MIN, REFERENCE_BETA_MAX).beta))
    beta_min = REFERENCE_BETA_MIN * REFERENCE_T / T
    if T >= REFERENCE_T:
        return REFERENCE_BETA_MIN, REFERENCE_BETA_MAX

    def gap(hi):
        return np.sum(np.log1p(-np.linspace(beta_min, hi, T))) - target

    if gap(0.999) > 0:
        raise ParameterError(f"T={T} is too short to reach the reference alpha_bar_T")
    return beta_min, float(brentq(gap, beta_min, 0.999, xtol=1e-14))


def desk_schedule(T: int = 100, variance: str = "beta") -> NoiseSchedule:
    return make_linear_schedule(T, *rescaled_endpoints(T), variance=variance)


def _data(x):
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)


def _per_sample(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    v = values[t - 1]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; `t` is a scalar or one per batch item."""
    x0d, epsd = _data(x0), _data(eps)
    if x0d.shape != epsd.shape:
        raise ShapeError(f"eps shape {epsd.shape} != x0 shape {x0d.shape}")
    t = sched.check_t(t)
    ab = _per_sample(sched.alpha_bar, t, x0d.ndim)
    out = np.sqrt(ab) * x0d + np.sqrt(1.0 - ab) * epsd
    return x0.with_data(out) if isinstance(x0, Volume) else out


def training_loss(predictor, x0, y, c_wav, t, eps, sched: NoiseSchedule) -> float:
    """Epsilon-prediction MSE averaged over voxels.

    Gradients of every trainable parameter reachable from the predictor are
    written into its parameter store(s) (previous gradients are discarded).
    """
    eps = _data(eps)
    x_t = forward_sample(_data(x0), t, eps, sched)
    for store in predictor.stores:
        store.zero_grad()
    t = np.broadcast_to(sched.check_t(t), (x_t.shape[0],))
    eps_hat = predictor(x_t, t, _data(y), None if c_wav is None else _data(c_wav))
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"predictor output {eps_hat.shape} != noise shape {eps.shape}")
    loss = ag.mse(eps_hat, eps, name="loss")
    ag.backward(loss)
    return float(loss.data)


def predict_eps(predictor, x_t, t: int, y, c_wav=None) -> np.ndarray:
    with ag.no_grad():
        out = predictor(x_t, np.full(x_t.shape[0], t), y, c_wav)
    eps_hat = out.data
    if not np.all(np.isfinite(eps_hat)):
        raise NumericError(f"non-finite noise prediction at t={t}")
    return eps_hat


def reverse_step(predictor, x_t, t: int, y, c_wav, sched: NoiseSchedule, z=None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; the noise `z` is ignored at t = 1."""
    t = int(sched.check_t(t))
    x_t = _data(x_t)
    eps_hat = predict_eps(predictor, x_t, t, _data(y), None if c_wav is None else _data(c_wav))
    return posterior_step(x_t, eps_hat, t, sched, z)


def posterior_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z=None) -> np.ndarray:
    beta = sched.beta[t - 1]
    alpha = 1.0 - beta
    ab = sched.alpha_bar[t - 1]
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    return mean + sched.sigma(t) * _data(z)


SAMPLING_STREAM = 0
TRAINING_STREAM = 1


def step_generator(seed: int, step: int, stream: int = SAMPLING_STREAM) -> np.random.Generator:
    """Counter-based generator keyed by (seed, step, stream); draws are in C (voxel) order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step), int(stream)])))


def _normal(seeds, step, shape):
    return np.stack([step_generator(s, step).standard_normal(shape) for s in seeds])


def sample(predictor, y, c_wav, sched: NoiseSchedule, rng_seed, clip=None) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    `rng_seed` is an int or one seed per batch item; each item draws its
    noise from its own stream so results do not depend on batching.  `clip`
    optionally bounds the returned x_0 (e.g. ``(-1, 1)``).
    """
    y = _data(y)
    seeds = np.atleast_1d(np.asarray(rng_seed, dtype=np.int64))
    if seeds.size == 1 and y.shape[0] > 1:
        seeds = seeds[0] + np.arange(y.shape[0])
    if seeds.size != y.shape[0]:
        raise ShapeError(f"{seeds.size} seeds for batch of {y.shape[0]}")
    shape = y.shape[1:]
    c = None if c_wav is None else _data(c_wav)
    # step index T + 1 keys the initial x_T draw
    x = _normal(seeds, sched.T + 1, shape)
    for t in range(sched.T, 0, -1):
        z = _normal(seeds, t, shape) if t > 1 else None
        x = reverse_step(predictor, x, t, y, c, sched, z)
    if clip is not None:
        x = np.clip(x, *clip)
    return x
