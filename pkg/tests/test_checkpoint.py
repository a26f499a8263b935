"""Checkpoint serialization round-trips and integrity errors."""

import numpy as np
import pytest

from hrt.checkpoint import (
    MAGIC, CheckpointError, load_checkpoint, load_model, save_checkpoint,
)
from hrt.model import ModelConfig, TransformerModel

CFG = ModelConfig(d_model=16, d_ff=32, n_heads=2, enc_layers=1, vocab_size=15,
                  max_len=16)


def test_round_trip(tmp_path):
    model = TransformerModel(CFG, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_model(path)
    assert loaded.config == CFG
    for name, p in model.params.items():
        assert np.array_equal(loaded.params[name].data, p.data)


def test_header_config(tmp_path):
    model = TransformerModel(CFG)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    config, values = load_checkpoint(path)
    assert config == CFG
    assert set(values) == set(model.params)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTCKPT0" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file(tmp_path):
    model = TransformerModel(CFG)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_parameter(tmp_path):
    import json
    import struct

    model = TransformerModel(CFG)
    path = tmp_path / "m.ckpt"
    # write a checkpoint missing one parameter
    names = sorted(model.params)[:-1]
    manifest = [{"name": n, "shape": list(model.params[n].data.shape)} for n in names]
    header = json.dumps({"config": CFG.to_dict(), "params": manifest}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
    with pytest.raises(CheckpointError):
        load_model(path)
