"""Smallest configuration that exercises every pipeline stage in seconds."""

import hashlib
from pathlib import Path

TINY_OVERRIDES = [
    "data.dims=8,8,8", "data.n_train=2", "data.n_test=3",
    "volume.patch_size=8", "volume.overlap=4",
    "diffusion.T=10", "ablate.T=10",
    "network.base_channels=4", "network.temb_dim=8", "network.groups=2",
    "train.steps=3", "train.log_every=0", "control.steps=3", "control.self_test_trials=2",
    "ablate.backbone_steps=2", "ablate.control_steps=2", "ablate.dose=1/20",
]


def tree_hashes(root) -> dict:
    """SHA-256 of every file under root, keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
