"""Minimal conditional 3D U-Net noise predictor.

Layout for ``levels = L`` with channel widths ``c_l = base * 2**l``::

    concat(x_t, y) -> enc0 -> [down0 -> enc1] ... -> enc{L-1} -> mid
    mid -> dec{L-1} -> [up{L-2} -> dec{L-2}] ... -> dec0 -> out (1x1x1)

Every ``enc``/``mid``/``dec`` block is two conv3x3x3 -> group norm -> SiLU
stages with a time-embedding projection added after the first stage, plus a
residual shortcut (1x1x1 conv when the channel count changes).  The
encoder outputs ``h_l`` are the skip features; an optional per-level offset
is added to each before the decoder concatenates it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ParameterError, ShapeError
from . import autograd as ag
from .params import ParamStore


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 8
    levels: int = 2
    in_channels: int = 2
    out_channels: int = 1
    temb_dim: int = 32
    groups: int = 4

    def __post_init__(self):
        if self.levels < 2:
            raise ParameterError(f"U-Net needs at least 2 levels, got {self.levels}")
        if self.temb_dim % 2:
            raise ParameterError("temb_dim must be even")
        for c in self.channels:
            if c % self.groups:
                raise ParameterError(f"{c} channels not divisible by {self.groups} groups")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**l for l in range(self.levels)]

    def check_spatial(self, dims) -> None:
        f = 2 ** (self.levels - 1)
        if any(d % f for d in dims):
            raise ShapeError(f"spatial dims {tuple(dims)} must be divisible by {f}")

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------- init helpers


def _conv_param(store, rng, name, c_in, c_out, k, scale=1.0):
    fan_in = c_in * k**3
    store.add(f"{name}.w", rng.normal(0.0, scale / math.sqrt(fan_in), (c_out, c_in, k, k, k)))
    store.add(f"{name}.b", np.zeros(c_out))


def _linear_param(store, rng, name, f_in, f_out):
    store.add(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(f_in), (f_out, f_in)))
    store.add(f"{name}.b", np.zeros(f_out))


def _block_params(store, rng, name, c_in, c_out, temb_dim):
    _conv_param(store, rng, f"{name}.conv1", c_in, c_out, 3, math.sqrt(2.0))
    store.add(f"{name}.norm1.g", np.ones(c_out))
    store.add(f"{name}.norm1.b", np.zeros(c_out))
    _linear_param(store, rng, f"{name}.temb", temb_dim, c_out)
    _conv_param(store, rng, f"{name}.conv2", c_out, c_out, 3, math.sqrt(2.0))
    store.add(f"{name}.norm2.g", np.ones(c_out))
    store.add(f"{name}.norm2.b", np.zeros(c_out))
    if c_in != c_out:
        _conv_param(store, rng, f"{name}.shortcut", c_in, c_out, 1)


def encoder_param_names(cfg: UNetConfig, store: ParamStore, include_mid=False) -> list[str]:
    """Parameter names a control branch copies: time MLP, encoder blocks, downsamplers."""
    prefixes = ["time."] + [f"enc{l}." for l in range(cfg.levels)] + [f"down{l}." for l in range(cfg.levels - 1)]
    if include_mid:
        prefixes.append("mid.")
    return [n for n in store.names() if n.startswith(tuple(prefixes))]


def init_unet(cfg: UNetConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    ch = cfg.channels
    _linear_param(store, rng, "time.fc1", cfg.temb_dim, cfg.temb_dim)
    _linear_param(store, rng, "time.fc2", cfg.temb_dim, cfg.temb_dim)
    c_prev = cfg.in_channels
    for l, c in enumerate(ch):
        if l > 0:
            _conv_param(store, rng, f"down{l - 1}", ch[l - 1], ch[l - 1], 3)
        _block_params(store, rng, f"enc{l}", c_prev, c, cfg.temb_dim)
        c_prev = c
    _block_params(store, rng, "mid", ch[-1], ch[-1], cfg.temb_dim)
    for l in reversed(range(cfg.levels)):
        if l < cfg.levels - 1:
            _conv_param(store, rng, f"up{l}", ch[l + 1], ch[l], 3)
        _block_params(store, rng, f"dec{l}", 2 * ch[l], ch[l], cfg.temb_dim)
    _conv_param(store, rng, "out", ch[0], cfg.out_channels, 1, 0.1)
    return store


# ------------------------------------------------------------ forward pieces


def sinusoidal(t, T: int, width: int) -> np.ndarray:
    """Sinusoids of t/T (rescaled to a 0-1000 phase range) at geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 1) or np.any(t > T):
        raise ParameterError(f"timestep outside [1, {T}]: {t}")
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    phase = (t / T * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def time_embedding(store: ParamStore, t, T: int, width: int, prefix: str = "") -> ag.Var:
    """Sinusoidal features followed by the trainable two-layer projection; (B, width)."""
    s = ag.const(sinusoidal(t, T, width), "time.sinusoid")
    h = ag.linear(s, store.var(f"{prefix}time.fc1.w"), store.var(f"{prefix}time.fc1.b"), f"{prefix}time.fc1")
    h = ag.silu(h, f"{prefix}time.act")
    return ag.linear(h, store.var(f"{prefix}time.fc2.w"), store.var(f"{prefix}time.fc2.b"), f"{prefix}time.fc2")


def conv(store, name, x, stride=1):
    return ag.conv3d(x, store.var(f"{name}.w"), store.var(f"{name}.b"), stride=stride, name=name)


def block(store, cfg, name, x, temb, stem_add=None):
    h = conv(store, f"{name}.conv1", x)
    if stem_add is not None:
        h = ag.add(h, stem_add, f"{name}.stem_add")
    h = ag.group_norm(h, store.var(f"{name}.norm1.g"), store.var(f"{name}.norm1.b"), cfg.groups, name=f"{name}.norm1")
    h = ag.silu(h, f"{name}.act1")
    proj = ag.linear(temb, store.var(f"{name}.temb.w"), store.var(f"{name}.temb.b"), f"{name}.temb")
    h = ag.add_channel(h, proj, f"{name}.temb_add")
    h = conv(store, f"{name}.conv2", h)
    h = ag.group_norm(h, store.var(f"{name}.norm2.g"), store.var(f"{name}.norm2.b"), cfg.groups, name=f"{name}.norm2")
    h = ag.silu(h, f"{name}.act2")
    # Residual path: group norm discards each sample's mean, the shortcut carries it.
    if f"{name}.shortcut.w" in store:
        x = ag.conv3d(x, store.var(f"{name}.shortcut.w"), store.var(f"{name}.shortcut.b"), padding=0,
                      name=f"{name}.shortcut")
    return ag.add(h, x, f"{name}.residual")


def encode(store, cfg, x_in, temb, prefix="", stem_add=None, with_mid=False):
    """Encoder pass; returns the per-level features (and the mid output if asked)."""
    feats = []
    x = x_in
    for l in range(cfg.levels):
        if l > 0:
            x = conv(store, f"{prefix}down{l - 1}", x, stride=2)
        x = block(store, cfg, f"{prefix}enc{l}", x, temb, stem_add if l == 0 else None)
        feats.append(x)
    mid = block(store, cfg, f"{prefix}mid", feats[-1], temb) if with_mid else None
    return feats, mid


def unet_forward(store: ParamStore, cfg: UNetConfig, x_t, temb: ag.Var, y, skip_offsets=None, mid_offset=None):
    """Noise prediction for (B, 1, D, H, W) inputs.

    Returns ``(eps_hat, encoder_features)``.  ``skip_offsets`` is an optional
    list with one tensor per level, added to that level's skip feature.
    """
    x_t, y = ag._as_var(x_t), ag._as_var(y)
    if x_t.shape[2:] != y.shape[2:] or x_t.shape[0] != y.shape[0]:
        raise ShapeError(f"x_t {x_t.shape} and y {y.shape} differ in batch/spatial shape")
    cfg.check_spatial(x_t.shape[2:])
    x_in = ag.concat([x_t, y], axis=1, name="input")
    if x_in.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x_in.shape[1]} channels, config expects {cfg.in_channels}")
    feats, mid = encode(store, cfg, x_in, temb, with_mid=True)
    if skip_offsets is not None:
        if len(skip_offsets) != cfg.levels:
            raise ShapeError(f"expected {cfg.levels} skip offsets, got {len(skip_offsets)}")
        for l, off in enumerate(skip_offsets):
            if off is not None and off.shape != feats[l].shape:
                raise ShapeError(f"skip offset {l} has shape {off.shape}, feature is {feats[l].shape}")
    if mid_offset is not None:
        mid = ag.add(mid, mid_offset, "mid.offset")
    u = mid
    for l in reversed(range(cfg.levels)):
        skip = feats[l]
        if skip_offsets is not None and skip_offsets[l] is not None:
            skip = ag.add(skip, skip_offsets[l], f"skip{l}.offset")
        if l < cfg.levels - 1:
            u = conv(store, f"up{l}", ag.upsample2(u, f"up{l}.nearest"))
        u = block(store, cfg, f"dec{l}", ag.concat([u, skip], axis=1, name=f"dec{l}.cat"), temb)
    out = ag.conv3d(u, store.var("out.w"), store.var("out.b"), padding=0, name="out")
    return out, feats


class UNetPredictor:
    """Backbone noise predictor ``eps_theta(x_t, t, y)``; ignores any wavelet prior."""

    def __init__(self, store: ParamStore, cfg: UNetConfig, T: int):
        self.store = store
        self.cfg = cfg
        self.T = T

    @property
    def stores(self):
        return [self.store]

    def __call__(self, x_t, t, y, c_wav=None) -> ag.Var:
        temb = time_embedding(self.store, t, self.T, self.cfg.temb_dim)
        return unet_forward(self.store, self.cfg, x_t, temb, y)[0]
