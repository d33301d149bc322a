"""Named parameter storage with freeze flags, gradient slots and Adam state."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, StateError
from . import autograd as ag


@dataclass
class Entry:
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


@dataclass
class ParamStore:
    entries: dict[str, Entry] = field(default_factory=dict)
    # bumped on every value mutation; autograd leaves record it
    version: int = 0

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        self.entries[name] = Entry(np.array(value, dtype=np.float64), trainable)
        self.version += 1

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> np.ndarray:
        return self.entries[name].value

    def names(self) -> list[str]:
        return list(self.entries)

    def set_value(self, name: str, value) -> None:
        entry = self.entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {entry.value.shape}")
        entry.value = value.copy()
        self.version += 1

    def var(self, name: str) -> ag.Var:
        """Autograd leaf for a parameter; frozen entries come back as constants."""
        entry = self.entries[name]
        if entry.trainable and ag.grad_enabled():
            return ag.leaf(entry.value, name, True, (self, name, self.version))
        return ag.Var(entry.value, name=name)

    def freeze(self, names=None) -> None:
        for name in self.entries if names is None else names:
            self.entries[name].trainable = False

    def zero_grad(self) -> None:
        for entry in self.entries.values():
            entry.grad = np.zeros_like(entry.value) if entry.trainable else None

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        entry = self.entries[name]
        if not entry.trainable:
            return
        if g.shape != entry.value.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {entry.value.shape}")
        entry.grad = g.copy() if entry.grad is None else entry.grad + g

    def trainable_names(self) -> list[str]:
        return [k for k, e in self.entries.items() if e.trainable]

    def checksum(self, names=None) -> str:
        """SHA-256 over names, shapes and little-endian float64 bytes."""
        h = hashlib.sha256()
        for name in sorted(self.entries if names is None else names):
            value = self.entries[name].value
            h.update(name.encode())
            h.update(repr(value.shape).encode())
            h.update(value.astype("<f8").tobytes())
        return h.hexdigest()

    def frozen_checksum(self) -> str:
        return self.checksum([k for k, e in self.entries.items() if not e.trainable])

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, e in self.entries.items():
            out.entries[k] = Entry(
                e.value.copy(), e.trainable,
                None if e.grad is None else e.grad.copy(),
                None if e.m is None else e.m.copy(),
                None if e.v is None else e.v.copy(),
                e.step,
            )
        return out

    def num_params(self, trainable_only=False) -> int:
        return sum(e.value.size for e in self.entries.values() if e.trainable or not trainable_only)


def adam_step(store: ParamStore, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update of every trainable entry, in place."""
    missing = [k for k, e in store.entries.items() if e.trainable and e.grad is None]
    if missing:
        raise StateError(f"no gradient for trainable parameters {missing[:3]}")
    for entry in store.entries.values():
        if not entry.trainable:
            continue
        g = entry.grad
        if entry.m is None:
            entry.m = np.zeros_like(entry.value)
            entry.v = np.zeros_like(entry.value)
        entry.step += 1
        entry.m = beta1 * entry.m + (1.0 - beta1) * g
        entry.v = beta2 * entry.v + (1.0 - beta2) * (g * g)
        m_hat = entry.m / (1.0 - beta1**entry.step)
        v_hat = entry.v / (1.0 - beta2**entry.step)
        entry.value = entry.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.version += 1
