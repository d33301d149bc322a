"""Patch sampling and the Adam training loop shared by backbone and control training."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import TRAINING_STREAM, NoiseSchedule, step_generator, training_loss
from .errors import ShapeError
from .network.params import ParamStore, adam_step
from .volume import Volume
from .wavelet import SubbandSelector, wavelet_prior

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    steps: int = 2000
    batch_size: int = 2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100


class PatchDataset:
    """Random aligned crops of paired (clean, low-dose) normalized volumes.

    Crop origins are drawn on even coordinates so the wavelet prior of a crop
    matches the corresponding region of the whole-volume transform.
    """

    def __init__(self, clean: Sequence[Volume], low: Sequence[Volume], patch_size: int,
                 selector: SubbandSelector | None = None, combine: str = "mean"):
        if len(clean) != len(low) or not clean:
            raise ShapeError("need the same non-zero number of clean and low-dose volumes")
        for c, y in zip(clean, low):
            if c.dims != y.dims:
                raise ShapeError(f"paired volumes differ in dims: {c.dims} vs {y.dims}")
            if min(c.dims) < patch_size:
                raise ShapeError(f"volume {c.dims} smaller than patch {patch_size}")
        if patch_size % 2:
            raise ShapeError("patch size must be even")
        self.clean = [c.data for c in clean]
        self.low = [y.data for y in low]
        self.patch_size = patch_size
        self.selector = selector or SubbandSelector("LLL")
        self.combine = combine

    def __len__(self):
        return len(self.clean)

    def draw(self, rng: np.random.Generator, batch_size: int):
        """Returns (x0, y, c_wav) arrays shaped (B, 1, p, p, p), (B, 1, p, p, p), (B, k, p/2, p/2, p/2)."""
        p = self.patch_size
        xs, ys, cs = [], [], []
        for _ in range(batch_size):
            i = int(rng.integers(len(self.clean)))
            dims = self.clean[i].shape
            o = [2 * int(rng.integers((d - p) // 2 + 1)) for d in dims]
            sl = tuple(slice(a, a + p) for a in o)
            xs.append(self.clean[i][sl])
            ys.append(self.low[i][sl])
            cs.append(wavelet_prior(ys[-1], self.selector, self.combine))
        return np.stack(xs)[:, None], np.stack(ys)[:, None], np.stack(cs)


def smooth(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def fit(predictor, store: ParamStore, dataset: PatchDataset, sched: NoiseSchedule,
        hyper: TrainHyper, use_prior: bool, check=None) -> list[float]:
    """Minimize the epsilon-prediction loss, updating only `store`.

    Each step draws its batch, timesteps and noise from a generator keyed by
    (seed, step), so a run is reproducible from its hyperparameters alone.
    `check` is called after every optimizer step (integrity hooks).
    """
    losses = []
    for step in range(1, hyper.steps + 1):
        rng = step_generator(hyper.seed, step, TRAINING_STREAM)
        x0, y, c = dataset.draw(rng, hyper.batch_size)
        t = rng.integers(1, sched.T + 1, size=hyper.batch_size)
        eps = rng.standard_normal(x0.shape)
        loss = training_loss(predictor, x0, y, c if use_prior else None, t, eps, sched)
        adam_step(store, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
        if check is not None:
            check(step)
        losses.append(loss)
        if hyper.log_every and step % hyper.log_every == 0:
            log.info("step %d/%d loss %.5f (smoothed %.5f)", step, hyper.steps, loss,
                     float(np.mean(losses[-hyper.log_every:])))
    return losses
