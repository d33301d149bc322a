"""Wavelet-conditioned control branch over a frozen U-Net backbone.

The branch holds a value copy of the backbone encoder (time MLP, encoder
blocks, downsamplers), a stride-2 transposed-conv embedding for the
half-resolution wavelet prior, a zero-initialized 1x1x1 conv gating that
embedding into the copy's stem, and one zero-initialized 1x1x1 conv per
encoder level whose output is added to the backbone's skip feature.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .errors import IntegrityError, ParameterError, ShapeError
from .network import autograd as ag
from .network.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from .network.params import ParamStore
from .network.unet import UNetConfig, encode, encoder_param_names, init_unet, time_embedding, unet_forward
from .training import PatchDataset, TrainHyper, fit
from .volume import Volume

log = logging.getLogger(__name__)


class CompatibilityError(ParameterError):
    """Backbone parameters do not match the network configuration."""


@dataclass
class ControlBranch:
    phi: ParamStore
    cfg: UNetConfig
    backbone_checksum: str
    prior_channels: int = 1
    inject_middle: bool = False

    @property
    def level_count(self) -> int:
        return self.cfg.levels

    def zero_conv_names(self) -> list[str]:
        names = ["zero_in"] + [f"zero{l}" for l in range(self.cfg.levels)]
        if self.inject_middle:
            names.append("zero_mid")
        return [f"{n}.{p}" for n in names for p in ("w", "b")]

    def reset_zero_convs(self) -> None:
        for name in self.zero_conv_names():
            self.phi.set_value(name, np.zeros_like(self.phi[name]))


def check_backbone(store: ParamStore, cfg: UNetConfig) -> None:
    reference = init_unet(cfg, seed=0)
    expected = {k: reference[k].shape for k in reference.names()}
    actual = {k: store[k].shape for k in store.names()}
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        bad = sorted(k for k in expected if k in actual and expected[k] != actual[k])
        extra = sorted(set(actual) - set(expected))
        raise CompatibilityError(
            f"backbone does not match config: missing={missing[:3]} shape_mismatch={bad[:3]} extra={extra[:3]}")


def init_from_backbone(backbone: ParamStore, cfg: UNetConfig, prior_channels: int = 1,
                       inject_middle: bool = False, seed: int = 0) -> ControlBranch:
    """Create a control branch from a backbone, freezing the backbone in the process."""
    check_backbone(backbone, cfg)
    backbone.freeze()
    phi = ParamStore()
    for name in encoder_param_names(cfg, backbone, include_mid=inject_middle):
        phi.add(name, backbone[name].copy(), trainable=True)
    c0 = cfg.channels[0]
    rng = np.random.default_rng(seed)
    phi.add("embed.w", rng.normal(0.0, 1.0 / math.sqrt(prior_channels * 8), (prior_channels, c0, 2, 2, 2)))
    phi.add("embed.b", np.zeros(c0))
    phi.add("zero_in.w", np.zeros((c0, c0, 1, 1, 1)))
    phi.add("zero_in.b", np.zeros(c0))
    for l, c in enumerate(cfg.channels):
        phi.add(f"zero{l}.w", np.zeros((c, c, 1, 1, 1)))
        phi.add(f"zero{l}.b", np.zeros(c))
    if inject_middle:
        c = cfg.channels[-1]
        phi.add("zero_mid.w", np.zeros((c, c, 1, 1, 1)))
        phi.add("zero_mid.b", np.zeros(c))
    return ControlBranch(phi, cfg, backbone.checksum(), prior_channels, inject_middle)


def _prior_array(c_wav, prior_channels):
    if isinstance(c_wav, Volume):
        c_wav = c_wav.data[None, None]
    c_wav = np.asarray(c_wav, dtype=np.float64)
    if c_wav.ndim != 5 or c_wav.shape[1] != prior_channels:
        raise ShapeError(f"prior must be (B, {prior_channels}, d, h, w), got {c_wav.shape}")
    return c_wav


def embed_prior(branch: ControlBranch, c_wav) -> ag.Var:
    """Transposed conv (kernel 2, stride 2): (B, k, d, h, w) -> (B, c0, 2d, 2h, 2w)."""
    c = ag.const(_prior_array(c_wav, branch.prior_channels), "prior")
    phi = branch.phi
    return ag.conv_transpose3d_k2s2(c, phi.var("embed.w"), phi.var("embed.b"), "embed")


def _zero_conv(phi, name, x):
    return ag.conv3d(x, phi.var(f"{name}.w"), phi.var(f"{name}.b"), padding=0, name=name)


def branch_offsets(branch: ControlBranch, x_t, t, y, c_wav, T: int):
    """Skip offsets (one per level) and optional mid offset produced by the branch."""
    cfg, phi = branch.cfg, branch.phi
    x_t, y = ag._as_var(x_t), ag._as_var(y)
    emb = embed_prior(branch, c_wav)
    if emb.shape[2:] != x_t.shape[2:]:
        raise ShapeError(f"embedded prior {emb.shape[2:]} does not match patch dims {x_t.shape[2:]}")
    stem_add = _zero_conv(phi, "zero_in", emb)
    temb = time_embedding(phi, t, T, cfg.temb_dim)
    x_in = ag.concat([x_t, y], axis=1, name="ctrl.input")
    feats, mid = encode(phi, cfg, x_in, temb, stem_add=stem_add, with_mid=branch.inject_middle)
    offsets = [_zero_conv(phi, f"zero{l}", h) for l, h in enumerate(feats)]
    mid_offset = _zero_conv(phi, "zero_mid", mid) if branch.inject_middle else None
    return offsets, mid_offset


def controlled_forward(backbone: ParamStore, branch: ControlBranch, x_t, t, y, c_wav, T: int) -> ag.Var:
    """Backbone noise prediction with branch offsets added to its skip features."""
    offsets, mid_offset = branch_offsets(branch, x_t, t, y, c_wav, T)
    temb = time_embedding(backbone, t, T, branch.cfg.temb_dim)
    return unet_forward(backbone, branch.cfg, x_t, temb, y, offsets, mid_offset)[0]


class ControlledPredictor:
    """``eps_{theta,phi}(x_t, t, y, c_wav)``; only the branch store is trainable."""

    def __init__(self, backbone: ParamStore, branch: ControlBranch, T: int):
        self.backbone = backbone
        self.branch = branch
        self.T = T

    @property
    def stores(self):
        return [self.branch.phi]

    def __call__(self, x_t, t, y, c_wav=None) -> ag.Var:
        if c_wav is None:
            raise ParameterError("controlled predictor needs a wavelet prior")
        return controlled_forward(self.backbone, self.branch, x_t, t, y, c_wav, self.T)


def verify_backbone(backbone: ParamStore, branch: ControlBranch) -> None:
    actual = backbone.checksum()
    if actual != branch.backbone_checksum:
        raise IntegrityError(f"backbone checksum {actual[:12]} != recorded {branch.backbone_checksum[:12]}")


def train_controlnet(backbone: ParamStore, branch: ControlBranch, dataset: PatchDataset,
                     sched: NoiseSchedule, hyper: TrainHyper, check_every: int = 50) -> list[float]:
    """Fit the branch on (x0, y, c_wav) triples with the backbone held fixed.

    The backbone checksum is compared with the one recorded at branch creation
    before training, every `check_every` steps and at the end.
    """
    verify_backbone(backbone, branch)
    if any(e.trainable for e in backbone.entries.values()):
        raise IntegrityError("backbone has trainable entries; freeze it before control training")
    predictor = ControlledPredictor(backbone, branch, sched.T)

    def check(step):
        if check_every and step % check_every == 0:
            verify_backbone(backbone, branch)

    losses = fit(predictor, branch.phi, dataset, sched, hyper, use_prior=True, check=check)
    verify_backbone(backbone, branch)
    return losses


def identity_self_test(backbone: ParamStore, branch: ControlBranch, T: int, patch: int,
                       trials: int = 4, seed: int = 0) -> float:
    """Max |controlled - backbone| over random inputs, computed without any tolerance."""
    cfg = branch.cfg
    rng = np.random.default_rng(seed)
    worst = 0.0
    with ag.no_grad():
        for _ in range(trials):
            x = rng.standard_normal((1, 1, patch, patch, patch))
            y = rng.standard_normal((1, 1, patch, patch, patch))
            c = rng.standard_normal((1, branch.prior_channels) + (patch // 2,) * 3)
            t = rng.integers(1, T + 1, size=1)
            ref = unet_forward(backbone, cfg, x, time_embedding(backbone, t, T, cfg.temb_dim), y)[0].data
            out = controlled_forward(backbone, branch, x, t, y, c, T).data
            worst = max(worst, float(np.max(np.abs(out - ref))))
    return worst


# ---------------------------------------------------------------- persistence


def branch_checkpoint(branch: ControlBranch, sched: NoiseSchedule, norm=None, extra=None) -> Checkpoint:
    info = {
        "backbone_checksum": branch.backbone_checksum,
        "prior_channels": branch.prior_channels,
        "inject_middle": branch.inject_middle,
    }
    return Checkpoint(branch.phi, "branch", branch.cfg.to_dict(), sched.to_dict(),
                      None if norm is None else {"lo": norm.lo, "hi": norm.hi},
                      {"branch": info, **(extra or {})})


def save_branch(branch: ControlBranch, sched: NoiseSchedule, path, norm=None, extra=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(branch_checkpoint(branch, sched, norm, extra)))


def load_branch(path, backbone: ParamStore) -> tuple[ControlBranch, Checkpoint]:
    """Load a branch checkpoint and verify it against the given backbone."""
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if ckpt.kind != "branch" or "branch" not in ckpt.extra:
        raise IntegrityError(f"{path} is not a control-branch checkpoint (kind={ckpt.kind!r})")
    info = ckpt.extra["branch"]
    branch = ControlBranch(ckpt.store, UNetConfig(**ckpt.config), info["backbone_checksum"],
                           int(info["prior_channels"]), bool(info["inject_middle"]))
    verify_backbone(backbone, branch)
    return branch, ckpt
