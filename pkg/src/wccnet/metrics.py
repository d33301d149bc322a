"""Volumetric image-quality metrics and the paired significance protocol.

PSNR, SSIM (sliding 3D windows), GMSD (3D Prewitt gradients) and NMAE are
computed on whole volumes.  Method comparisons use two-sided Wilcoxon
signed-rank tests on per-case values with Holm step-down adjustment across
the four metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ParameterError, ShapeError
from .volume import Volume

METRICS = ("psnr", "ssim", "gmsd", "nmae")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "gmsd": False, "nmae": False}
INF_SENTINEL = "inf"
_W = 20  # table column width
EXACT_MAX_N = 20


class NormalizationError(ParameterError):
    pass


def _pair(pred, ref):
    p = pred.data if isinstance(pred, Volume) else np.asarray(pred, dtype=np.float64)
    r = ref.data if isinstance(ref, Volume) else np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape:
        raise ShapeError(f"prediction {p.shape} and reference {r.shape} differ in shape")
    if p.size == 0:
        raise ParameterError("empty volume")
    return p, r


def _range(r, data_range):
    if data_range is None:
        data_range = float(r.max() - r.min())
    if data_range <= 0:
        raise ParameterError(f"data_range must be > 0, got {data_range}")
    return data_range


def psnr(pred, ref, data_range=None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    p, r = _pair(pred, ref)
    L = _range(r, data_range)
    mse = float(np.mean((p - r) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


def _window_weights(window: int, gaussian_sigma):
    if gaussian_sigma is None:
        return None
    ax = np.arange(window) - (window - 1) / 2
    g = np.exp(-0.5 * (ax / gaussian_sigma) ** 2)
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return w / w.sum()


def _local_mean(x, window, weights):
    win = sliding_window_view(x, (window,) * 3)
    if weights is None:
        return win.mean(axis=(-3, -2, -1))
    return np.tensordot(win, weights, axes=3)


def ssim3(pred, ref, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range=None,
          gaussian_sigma=None) -> float:
    """Mean SSIM over every fully contained window (uniform by default).

    Local statistics use 1/N (population) normalization.
    """
    p, r = _pair(pred, ref)
    if any(window > n for n in p.shape):
        raise ParameterError(f"SSIM window {window} larger than volume {p.shape}")
    L = _range(r, data_range)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    w = _window_weights(window, gaussian_sigma)
    mu_p, mu_r = _local_mean(p, window, w), _local_mean(r, window, w)
    var_p = _local_mean(p * p, window, w) - mu_p * mu_p
    var_r = _local_mean(r * r, window, w) - mu_r * mu_r
    cov = _local_mean(p * r, window, w) - mu_p * mu_r
    num = (2.0 * mu_p * mu_r + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_r * mu_r + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def prewitt_magnitude(x: np.ndarray) -> np.ndarray:
    """3D Prewitt gradient magnitude on interior voxels, shape (d-2, h-2, w-2).

    Each axis derivative is the central difference x[+1] - x[-1] averaged over
    the 3x3 neighbourhood in the other two axes.
    """
    if any(n < 3 for n in x.shape):
        raise ParameterError(f"GMSD needs every dim >= 3, got {x.shape}")
    win = sliding_window_view(x, (3, 3, 3))
    gd = (win[..., 2, :, :] - win[..., 0, :, :]).mean(axis=(-2, -1))
    gh = (win[..., :, 2, :] - win[..., :, 0, :]).mean(axis=(-2, -1))
    gw = (win[..., :, :, 2] - win[..., :, :, 0]).mean(axis=(-2, -1))
    return np.sqrt(gd * gd + gh * gh + gw * gw)


def gmsd(pred, ref, c=None, data_range=None) -> float:
    """Population standard deviation of the gradient-magnitude similarity map.

    The stability constant defaults to 170 scaled from an 8-bit range to the
    reference's data range.
    """
    p, r = _pair(pred, ref)
    if c is None:
        c = 170.0 * (_range(r, data_range) / 255.0) ** 2
    gp, gr = prewitt_magnitude(p), prewitt_magnitude(r)
    gms = (2.0 * gp * gr + c) / (gp * gp + gr * gr + c)
    return float(np.std(gms))


def nmae(pred, ref) -> float:
    """sum |pred - ref| / sum |ref|."""
    p, r = _pair(pred, ref)
    denom = float(np.sum(np.abs(r)))
    if denom == 0:
        raise NormalizationError("NMAE undefined for an all-zero reference")
    return float(np.sum(np.abs(p - r)) / denom)


def all_metrics(pred, ref, data_range=None, ssim_window: int = 7, gaussian_sigma=None) -> dict:
    return {
        "psnr": psnr(pred, ref, data_range),
        "ssim": ssim3(pred, ref, window=ssim_window, data_range=data_range, gaussian_sigma=gaussian_sigma),
        "gmsd": gmsd(pred, ref, data_range=data_range),
        "nmae": nmae(pred, ref),
    }


# ------------------------------------------------------------- statistics


def paired_differences(a, b) -> np.ndarray:
    """a - b elementwise, with equal infinities (identical PSNR cases) counted as ties."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        d = a - b
    return np.where(a == b, 0.0, d)


def _clean_diffs(diffs):
    d = np.asarray(diffs, dtype=np.float64)
    if np.any(np.isnan(d)):
        raise ParameterError("paired differences contain NaN")
    return d[d != 0]


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments giving each value of the doubled positive-rank sum.

    Exhaustive over all 2**n assignments, tallied by dynamic programming.
    """
    counts = np.zeros(int(sum(doubled_ranks)) + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs) -> float:
    """Two-sided p-value for paired differences (zero differences dropped).

    Exact for n <= 20, otherwise the normal approximation with tie and
    continuity corrections.  All-zero input is degenerate and returns 1.0.
    """
    d = _clean_diffs(diffs)
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        total = int(doubled.sum())
        w2 = int(doubled[d > 0].sum())
        counts = signed_rank_null_counts(doubled.tolist())
        s = np.arange(counts.size)
        extreme = np.abs(2 * s - total) >= abs(2 * w2 - total)
        return float(min(1.0, counts[extreme].sum() / 2.0**n))
    w = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * (1.0 - ndtr(z))))


def holm_correct(pvals) -> list[float]:
    """Holm step-down adjusted p-values in the original order."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ParameterError(f"p-values must lie in [0, 1]: {p}")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for j, idx in enumerate(order):
        running = max(running, min(1.0, (m - j) * p[idx]))
        adjusted[idx] = running
    return adjusted.tolist()


# ------------------------------------------------------------------ report


def _encode(x):
    if isinstance(x, float) and math.isinf(x):
        return INF_SENTINEL if x > 0 else "-inf"
    return x


def aggregate(values: Sequence[float]) -> dict:
    """Mean and sample std over finite values; infinite values are counted separately."""
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    return {
        "mean": float(finite.mean()) if finite.size else None,
        "std": float(finite.std(ddof=1)) if finite.size > 1 else 0.0 if finite.size else None,
        "n": int(v.size),
        "n_inf": int(np.count_nonzero(np.isinf(v))),
    }


@dataclass
class MetricReport:
    method: str
    cases: list[str]
    values: dict[str, list[float]]
    comparator: str | None = None
    p_raw: dict[str, float] = field(default_factory=dict)
    p_holm: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return {m: aggregate(self.values[m]) for m in METRICS}

    def flags(self) -> dict:
        """'**' for Holm-adjusted p < 0.01, '*' for p < 0.05, '' otherwise."""
        return {m: "**" if p < 0.01 else "*" if p < 0.05 else "" for m, p in self.p_holm.items()}

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "comparator": self.comparator,
            "cases": list(self.cases),
            **{m: [_encode(float(x)) for x in self.values[m]] for m in METRICS},
            "aggregate": self.aggregates,
            "p_raw": dict(self.p_raw),
            "p_holm": dict(self.p_holm),
            "significance": self.flags(),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'case':<12}" + "".join(f"{m.upper():>{_W}}" for m in METRICS)
        rows = [head, "-" * len(head)]
        for i, case in enumerate(self.cases):
            rows.append(f"{case:<12}" + "".join(f"{_fmt(self.values[m][i]):>{_W}}" for m in METRICS))
        rows.append("-" * len(head))
        agg = self.aggregates
        flags = self.flags()
        cells = []
        for m in METRICS:
            a = agg[m]
            cell = "n/a" if a["mean"] is None else f"{a['mean']:.4f}±{a['std']:.4f}{flags.get(m, '')}"
            cells.append(f"{cell:>{_W}}")
        rows.append(f"{'mean±std':<12}" + "".join(cells))
        if any(agg[m]["n_inf"] for m in METRICS):
            rows.append("  (" + ", ".join(f"{m}: {agg[m]['n_inf']} infinite value(s) excluded"
                                          for m in METRICS if agg[m]["n_inf"]) + ")")
        if self.comparator:
            rows.append(f"  paired vs {self.comparator}: " + ", ".join(
                f"{m} p={self.p_raw[m]:.4g} holm={self.p_holm[m]:.4g}" for m in METRICS if m in self.p_raw))
        return "\n".join(rows)


def _fmt(x):
    return INF_SENTINEL if math.isinf(x) else f"{x:.4f}"


def paired_tests(a: Mapping[str, Sequence[float]], b: Mapping[str, Sequence[float]]) -> tuple[dict, dict]:
    """Wilcoxon p per metric for per-case values a - b, then Holm across metrics."""
    raw = {}
    for m in METRICS:
        if len(a[m]) != len(b[m]):
            raise ShapeError(f"{m}: {len(a[m])} vs {len(b[m])} cases")
        raw[m] = wilcoxon_signed_rank(paired_differences(a[m], b[m]))
    adj = holm_correct([raw[m] for m in METRICS])
    return raw, dict(zip(METRICS, adj))


def evaluate_cases(method: str, preds: Sequence, refs: Sequence, cases: Sequence[str], **kw) -> MetricReport:
    values = {m: [] for m in METRICS}
    for p, r in zip(preds, refs):
        for m, v in all_metrics(p, r, **kw).items():
            values[m].append(v)
    return MetricReport(method, list(cases), values)


def compare(report: MetricReport, comparator: MetricReport) -> MetricReport:
    """Attach paired test results of `report` against `comparator` (same cases required)."""
    if list(report.cases) != list(comparator.cases):
        raise ShapeError("paired comparison needs identical case lists")
    report.p_raw, report.p_holm = paired_tests(report.values, comparator.values)
    report.comparator = comparator.method
    return report
