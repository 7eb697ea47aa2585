"""Flat binary model checkpoints.

Layout (all integers little-endian):

    bytes 0..7    magic b"CEGCKPT1"
    bytes 8..11   uint32 header length H
    bytes 12..12+H  UTF-8 JSON header: {"version": 1,
                                        "config": <canonical ModelConfig dict>,
                                        "tensors": [{"name", "shape", "offset"}...]}
    payload       float32 little-endian tensor data, concatenated in
                  header order; offsets are element offsets into payload
    last 32 bytes SHA-256 of everything before it

load(save(m)) == m bit-exactly for float32 models; float64 models are
stored (and therefore reloaded) as float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build_model

MAGIC = b"CEGCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint file."""


def save_checkpoint(model: Model, path) -> None:
    tensors = []
    offset = 0
    blobs = []
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"version": VERSION, "config": model.config.to_dict(), "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<I", body, len(MAGIC))
    header = json.loads(body[len(MAGIC) + 4 : len(MAGIC) + 4 + hlen].decode("utf-8"))
    if header["version"] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header['version']}")
    config = ModelConfig.from_dict(header["config"])
    payload = np.frombuffer(body, dtype="<f4", offset=len(MAGIC) + 4 + hlen)
    model = build_model(config)
    expected = set(model.params)
    seen = set()
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        size = int(np.prod(shape)) if shape else 1
        model.params[name].data = payload[off : off + size].reshape(shape).copy()
        seen.add(name)
    if seen != expected:
        raise CheckpointError(f"missing tensors: {sorted(expected - seen)}")
    return model
