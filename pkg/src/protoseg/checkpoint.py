"""Versioned binary checkpoints.

Layout::

    b"PSEG" | u32 version | u64 header length | JSON header | float64 payload

All integers and floats are little-endian.  The JSON header carries the
network config, the training-stage echo, seeds, and a directory of every
tensor (name, shape, offset and count in float64 units).  The payload is
the concatenation of those tensors in directory order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import NetConfig

MAGIC = b"PSEG"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
PROTOTYPE_KEY = "prototypes"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    net_config: NetConfig
    params: dict
    prototypes: np.ndarray
    n_classes: int
    stage: dict = field(default_factory=dict)
    iteration: int = 0
    seeds: dict = field(default_factory=dict)
    log: list = field(default_factory=list, repr=False, compare=False)

    @property
    def active_prototypes(self):
        """Prototype rows 0..n_classes."""
        return self.prototypes[: self.n_classes + 1]


def to_bytes(ckpt):
    tensors = [(name, np.asarray(ckpt.params[name], dtype=np.float64)) for name in ckpt.params]
    tensors.append((PROTOTYPE_KEY, np.asarray(ckpt.prototypes, dtype=np.float64)))
    directory, offset = [], 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = {
        "net_config": ckpt.net_config.to_dict(),
        "n_classes": int(ckpt.n_classes),
        "stage": ckpt.stage,
        "iteration": int(ckpt.iteration),
        "seeds": ckpt.seeds,
        "prototype_dims": list(np.shape(ckpt.prototypes)),
        "tensors": directory,
        "payload_values": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors)
    return _PREAMBLE.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def from_bytes(raw, source="<bytes>"):
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic, not a PSEG checkpoint")
    if len(raw) < _PREAMBLE.size:
        raise TruncatedPayloadError(f"{source}: truncated preamble")
    _, version, hlen = _PREAMBLE.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
    start = _PREAMBLE.size
    if len(raw) < start + hlen:
        raise TruncatedPayloadError(f"{source}: truncated header")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = raw[start + hlen:]
    expected = 8 * header["payload_values"]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise CheckpointError(f"{source}: {len(payload) - expected} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for entry in header["tensors"]:
        chunk = values[entry["offset"]: entry["offset"] + entry["count"]]
        tensors[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    protos = tensors.pop(PROTOTYPE_KEY)
    return Checkpoint(
        net_config=NetConfig.from_dict(header["net_config"]),
        params=tensors,
        prototypes=protos,
        n_classes=header["n_classes"],
        stage=header["stage"],
        iteration=header["iteration"],
        seeds=header["seeds"],
    )


def save_checkpoint(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes(), str(path))
