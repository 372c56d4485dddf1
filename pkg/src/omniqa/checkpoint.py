"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic     4 bytes  b"VGCN"
    version   u32      currently 1
    config    u32 length + UTF-8 JSON (architecture echo)
    count     u32      number of tensors
    per tensor:
        name  u16 length + UTF-8
        ndim  u8, then ndim x u32 dims
        dtype u8 (0 = float32)
        data  raw little-endian values

Tensors cover every parameter and every batch-norm running statistic, so a
round trip restores predictions bit for bit.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, QualityModel

MAGIC = b"VGCN"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4")}


class CheckpointError(RuntimeError):
    """Unreadable or mismatched checkpoint file."""


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def save_checkpoint(model: QualityModel, path) -> None:
    """Write the model's config echo and all tensors."""
    state = model.state_dict()
    config_blob = json.dumps(
        {"model": model.cfg.to_dict(), "seed": model.seed},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(struct.pack("<B", 0))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> QualityModel:
    """Rebuild the model from its config echo and restore every tensor."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, clen).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            (tag,) = struct.unpack("<B", _read_exact(fh, 1))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
            dtype = _DTYPE_TAGS[tag]
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, n_items * dtype.itemsize)
            state[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after checkpoint payload")

    model = QualityModel(ModelConfig.from_dict(config["model"]), seed=config["seed"])
    model.load_state_dict(state)
    return model
