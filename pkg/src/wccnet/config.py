"""Run configuration: sectioned ``key = value`` files with command-line overrides.

Every value is parsed and validated against the receiving module's
preconditions before a command starts.  The config hash covers every
section except ``[paths]``, so relocating a run does not change it.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable

from .diffusion import VARIANCES, NoiseSchedule, make_linear_schedule, rescaled_endpoints
from .errors import ParameterError
from .network.unet import UNetConfig
from .training import TrainHyper
from .wavelet import SubbandSelector


class ConfigError(ParameterError):
    """Invalid configuration; the message names the offending key."""


def _fraction(text: str) -> float:
    try:
        value = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a fraction: {text!r}") from exc
    if not 0 < value <= 1:
        raise ValueError(f"dose fraction {text} outside (0, 1]")
    return value


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _optional_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _positive(v):
    if v <= 0:
        raise ValueError("must be > 0")


def _non_negative(v):
    if v < 0:
        raise ValueError("must be >= 0")


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
    return check


def _selectors(v):
    for name in v:
        if name.lower() != "none":
            SubbandSelector.parse(name)


def _dims(v):
    if len(v) != 3 or min(v) < 2:
        raise ValueError("need three dims >= 2")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: str
    check: Callable | None = None


SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "dims": Key(_ints, "24,24,24", _dims),
        "n_train": Key(int, "16", _positive),
        "n_test": Key(int, "20", _positive),
        "train_seed": Key(int, "0", _non_negative),
        "test_seed": Key(int, "1000", _non_negative),
        "train_dose": Key(_fraction, "1/20"),
        "test_doses": Key(lambda s: tuple(_fraction(x) for x in _list(s)), "1/20,1/50,1/4"),
        "counts_per_unit": Key(float, "200", _positive),
        "noise_model": Key(str, "poisson", _choice("poisson", "gaussian")),
        "ellipsoids_min": Key(int, "3", _positive),
        "ellipsoids_max": Key(int, "6", _positive),
        "uptake_min": Key(float, "0.2", _non_negative),
        "uptake_max": Key(float, "6.0", _positive),
        "bias_amplitude": Key(float, "0.15", _non_negative),
        "blur_sigma": Key(float, "2.0", _positive),
    },
    "volume": {
        "patch_size": Key(int, "16", _positive),
        "overlap": Key(int, "8", _non_negative),
        "norm_percentile": Key(float, "99.5", _positive),
    },
    "diffusion": {
        "T": Key(int, "50", _positive),
        "beta_min": Key(_optional_float, "auto"),
        "beta_max": Key(_optional_float, "auto"),
        "variance": Key(str, "beta_tilde", _choice(*VARIANCES)),
        "clip": Key(_bool, "true"),
    },
    "network": {
        "base_channels": Key(int, "8", _positive),
        "levels": Key(int, "2", _positive),
        "temb_dim": Key(int, "32", _positive),
        "groups": Key(int, "4", _positive),
        "init_seed": Key(int, "0", _non_negative),
    },
    "train": {
        "steps": Key(int, "2000", _positive),
        "batch_size": Key(int, "2", _positive),
        "lr": Key(float, "1e-3", _positive),
        "beta1": Key(float, "0.9"),
        "beta2": Key(float, "0.999"),
        "eps": Key(float, "1e-8", _positive),
        "seed": Key(int, "0", _non_negative),
        "log_every": Key(int, "100", _non_negative),
    },
    "control": {
        "selector": Key(str, "LLL", lambda v: SubbandSelector.parse(v)),
        "combine": Key(str, "mean", _choice("mean", "stack")),
        "inject_middle": Key(_bool, "false"),
        "steps": Key(int, "2000", _positive),
        "lr": Key(float, "1e-3", _positive),
        "seed": Key(int, "1", _non_negative),
        "check_every": Key(int, "50", _non_negative),
        "self_test_trials": Key(int, "4", _positive),
    },
    "sample": {
        "seed": Key(int, "0", _non_negative),
    },
    "eval": {
        "comparator": Key(str, "low-dose"),
        "ssim_window": Key(int, "7", _positive),
    },
    "ablate": {
        "selectors": Key(_list, "none,LLL,HHH,AllHigh,AllLow,AllBands", _selectors),
        "T": Key(int, "20", _positive),
        "backbone_steps": Key(int, "200", _positive),
        "control_steps": Key(int, "200", _positive),
        "dose": Key(_fraction, "1/20"),
    },
    "paths": {
        "data_dir": Key(str, "data"),
        "out_dir": Key(str, "runs"),
    },
}


class RunConfig:
    """Parsed configuration; attribute-style access by section, e.g. ``cfg.train.lr``."""

    def __init__(self, raw: dict[str, dict[str, str]]):
        self.raw = {s: dict(v) for s, v in raw.items()}
        self.values: dict[str, dict[str, object]] = {}
        for section, keys in SCHEMA.items():
            self.values[section] = {}
            for key, spec in keys.items():
                text = self.raw.get(section, {}).get(key, spec.default)
                self.values[section][key] = _parse_key(section, key, spec, text)
        for section, keys in self.raw.items():
            unknown = set(keys) - set(SCHEMA.get(section, {}))
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            if unknown:
                raise ConfigError(f"unknown config key {section}.{sorted(unknown)[0]}")
        self._validate()

    def __getattr__(self, section):
        try:
            return _Section(section, self.__dict__["values"][section])
        except KeyError:
            raise AttributeError(section) from None

    def _validate(self) -> None:
        d, v, n = self.values["data"], self.values["volume"], self.values["network"]
        p = v["patch_size"]
        if v["overlap"] >= p:
            raise ConfigError(f"volume.overlap must be < patch_size ({p})")
        if p % 2:
            raise ConfigError("volume.patch_size must be even (wavelet prior)")
        if p % 2 ** (n["levels"] - 1):
            raise ConfigError(f"volume.patch_size must be divisible by 2**(levels-1) = {2 ** (n['levels'] - 1)}")
        if min(d["dims"]) < p:
            raise ConfigError(f"data.dims {d['dims']} smaller than volume.patch_size {p}")
        if any(x % 2 for x in d["dims"]):
            raise ConfigError("data.dims must be even")
        if d["ellipsoids_min"] > d["ellipsoids_max"]:
            raise ConfigError("data.ellipsoids_min exceeds data.ellipsoids_max")
        if d["uptake_min"] > d["uptake_max"]:
            raise ConfigError("data.uptake_min exceeds data.uptake_max")
        if not 0 < v["norm_percentile"] <= 100:
            raise ConfigError("volume.norm_percentile must lie in (0, 100]")
        try:
            self.unet_config()
        except ParameterError as exc:
            raise ConfigError(f"network: {exc}") from exc
        for section in ("diffusion", "ablate"):
            try:
                self.schedule(self.values[section]["T"])
            except ParameterError as exc:
                raise ConfigError(f"{section}.T / diffusion.beta_*: {exc}") from exc

    # ---------------------------------------------------------- derived objects

    def unet_config(self) -> UNetConfig:
        n = self.values["network"]
        return UNetConfig(base_channels=n["base_channels"], levels=n["levels"], temb_dim=n["temb_dim"],
                          groups=n["groups"])

    def schedule(self, T: int | None = None) -> NoiseSchedule:
        """Linear schedule; 'auto' endpoints are rescaled to keep the T=1000 terminal alpha_bar."""
        s = self.values["diffusion"]
        T = s["T"] if T is None else T
        lo, hi = rescaled_endpoints(T)
        lo = lo if s["beta_min"] is None else s["beta_min"]
        hi = hi if s["beta_max"] is None else s["beta_max"]
        return make_linear_schedule(T, lo, hi, s["variance"])

    def train_hyper(self, section: str = "train", steps: int | None = None) -> TrainHyper:
        t, c = self.values["train"], self.values[section]
        return TrainHyper(steps=c["steps"] if steps is None else steps, batch_size=t["batch_size"], lr=c["lr"],
                          beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"], seed=c["seed"],
                          log_every=t["log_every"])

    def selector(self) -> SubbandSelector:
        return SubbandSelector.parse(self.values["control"]["selector"])

    # ------------------------------------------------------------- identity

    def canonical(self) -> dict:
        return {s: {k: _jsonable(v) for k, v in keys.items()} for s, keys in self.values.items() if s != "paths"}

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, spec in keys.items():
                lines.append(f"{key} = {self.raw.get(section, {}).get(key, spec.default)}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        raw = {s: dict(v) for s, v in self.raw.items()}
        apply_overrides(raw, overrides)
        return RunConfig(raw)


class _Section:
    def __init__(self, name, values):
        self._name = name
        self._values = values

    def __getattr__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(f"{self._name}.{key}") from None


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _parse_key(section, key, spec: Key, text: str):
    try:
        value = spec.parse(text)
        if spec.check is not None:
            spec.check(value)
    except (ValueError, TypeError, ParameterError) as exc:
        raise ConfigError(f"invalid value for {section}.{key} = {text!r}: {exc}") from exc
    return value


def apply_overrides(raw: dict, overrides: Iterable[str]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        raw.setdefault(section, {})[key] = value.strip()


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read an INI-style file (optional), apply ``section.key=value`` overrides and validate."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keys are case-sensitive (T)
        text = Path(path).read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        raw = {s: dict(parser[s]) for s in parser.sections()}
    apply_overrides(raw, overrides)
    return RunConfig(raw)


def smoke_config(overrides: Iterable[str] = ()) -> RunConfig:
    """The bundled desk-scale defaults."""
    return load_config(None, overrides)
