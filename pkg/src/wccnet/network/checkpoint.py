"""VXC1 checkpoint files.

Layout: magic ``VXC1``, u32 format version, u64 manifest length, UTF-8 JSON
manifest, then the tensor payload.  Every tensor is little-endian IEEE-754
float64, row-major, at the byte offset the manifest records (relative to the
payload start).  Entries with optimizer state store value, first moment and
second moment back to back.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .params import Entry, ParamStore

MAGIC = b"VXC1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    store: ParamStore
    kind: str
    config: dict
    schedule: dict | None = None
    norm: dict | None = None
    extra: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, e in ckpt.store.entries.items():
        arrays = [e.value] + ([e.m, e.v] if e.m is not None else [])
        entries.append({
            "name": name,
            "shape": list(e.value.shape),
            "trainable": bool(e.trainable),
            "adam": e.m is not None,
            "step": int(e.step),
            "offset": offset,
        })
        for a in arrays:
            raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "version": VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "schedule": ckpt.schedule,
        "norm": ckpt.norm,
        "extra": ckpt.extra,
        "entries": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _HEADER.size + mlen
    if start > len(buf):
        raise FormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(buf[_HEADER.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from None
    if manifest.get("version") != VERSION:
        raise FormatError("manifest version does not match header")
    try:
        return _decode_entries(manifest, memoryview(buf)[start:])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint manifest: {exc!r}") from None


def _decode_entries(manifest: dict, payload) -> Checkpoint:
    store = ParamStore()
    end = 0
    for spec in manifest["entries"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        count = 3 if spec["adam"] else 1
        lo, hi = spec["offset"], spec["offset"] + 8 * n * count
        if hi > len(payload):
            raise FormatError(f"truncated payload for entry {spec['name']!r}")
        arrs = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64).reshape((count,) + shape)
        entry = Entry(arrs[0].copy(), bool(spec["trainable"]), step=int(spec["step"]))
        if spec["adam"]:
            entry.m, entry.v = arrs[1].copy(), arrs[2].copy()
        store.entries[spec["name"]] = entry
        end = max(end, hi)
    if end != len(payload):
        raise FormatError(f"checkpoint payload has {len(payload) - end} unexpected trailing bytes")
    return Checkpoint(store, manifest["kind"], manifest["config"], manifest.get("schedule"),
                      manifest.get("norm"), manifest.get("extra") or {})


def save_checkpoint(store: ParamStore, cfg, sched, path, *, norm=None, kind="backbone", extra=None) -> Checkpoint:
    """Write `store` with its network config, noise schedule and normalization stats."""
    ckpt = Checkpoint(
        store,
        kind,
        cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg),
        None if sched is None else sched.to_dict(),
        None if norm is None else {"lo": float(norm.lo), "hi": float(norm.hi)},
        dict(extra or {}),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
