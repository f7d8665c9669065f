"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian u32 version, u64 header length, a
canonical JSON header (names, shapes, byte offsets, step, config hash)
and the raw float64 little-endian payload. Identical weights give
identical bytes, which np.savez (zip timestamps) does not guarantee.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LI3DCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigHashWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_hash: str = ""
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for group, tensors in (("weights", ckpt.weights), ("optim", ckpt.optim)):
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(a.shape),
                            "offset": offset})
            chunks.append(a.tobytes())
            offset += a.nbytes
    header = {"version": VERSION, "step": int(ckpt.step), "config_hash": ckpt.config_hash,
              "meta": ckpt.meta, "tensors": entries, "payload_bytes": offset}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    payload = memoryview(raw)[20 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of "
                              f"{header['payload_bytes']} bytes)")
    groups: dict[str, dict[str, np.ndarray]] = {"weights": {}, "optim": {}}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        groups[e["group"]][e["name"]] = a.astype(np.float64).reshape(e["shape"])
    return Checkpoint(groups["weights"], groups["optim"], header["step"],
                      header["config_hash"], header["meta"])


def apply_weights(params, ckpt: Checkpoint, config_hash: str | None = None,
                  source: str = "checkpoint") -> None:
    """Copy checkpoint weights into ``params``; mismatches name the tensor."""
    if config_hash is not None and ckpt.config_hash and ckpt.config_hash != config_hash:
        warnings.warn(f"{source} was written with model config {ckpt.config_hash}, "
                      f"current config is {config_hash}", ConfigHashWarning, stacklevel=2)
    missing = [k for k in params if k not in ckpt.weights]
    if missing:
        raise CheckpointError(f"{source} lacks tensor {missing[0]!r} "
                              f"({len(missing)} missing in total)")
    extra = [k for k in ckpt.weights if k not in params]
    if extra:
        raise CheckpointError(f"{source} has unexpected tensor {extra[0]!r}")
    for k, t in params.items():
        a = ckpt.weights[k]
        if a.shape != t.shape:
            raise CheckpointError(f"tensor {k!r}: model expects shape {t.shape}, "
                                  f"{source} holds {a.shape}")
    for k, t in params.items():
        t.data = ckpt.weights[k].copy()
