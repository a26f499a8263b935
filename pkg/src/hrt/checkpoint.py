"""Flat binary checkpoint: magic, JSON header (config + manifest), raw values.

Layout: 8-byte magic "HRTCKPT1", uint32 little-endian header length, UTF-8
JSON header, then each parameter's float64 values little-endian in manifest
order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, TransformerModel

MAGIC = b"HRTCKPT1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model, path):
    names = sorted(model.params)
    manifest = [
        {"name": n, "shape": list(model.params[n].data.shape)} for n in names
    ]
    header = json.dumps({"config": model.config.to_dict(), "params": manifest}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, {name: float64 array})."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        config = ModelConfig.from_dict(header["config"])
        values = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"truncated checkpoint at {entry['name']}")
            values[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return config, values


def load_model(path):
    """Rebuild a TransformerModel from a checkpoint file."""
    config, values = load_checkpoint(path)
    model = TransformerModel(config)
    missing = set(model.params) - set(values)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    for name, p in model.params.items():
        if values[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data[...] = values[name]
    return model
