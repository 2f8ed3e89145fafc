import json
import struct

import numpy as np
import pytest
import torch

from icflow.backbone import FlowTransformer, randomize_
from icflow.checkpoint import (
    MAGIC,
    ConfigMismatchError,
    ContainerError,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)


def test_byte_layout(tmp_path):
    arr = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    path = write_container(tmp_path / "c.icft", "test", {"a": 1}, {"x": arr, "i": np.arange(3)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == 1
    header = json.loads(raw[16 : 16 + hlen])
    start = 16 + hlen + (-(16 + hlen)) % 8
    x = header["tensors"][0]
    assert x["name"] == "x" and x["shape"] == [1, 3] and x["dtype"] == "float32"
    assert raw[start + x["offset"] : start + x["offset"] + 12] == struct.pack("<3f", 1.0, 2.0, 3.0)
    assert all(e["offset"] % 8 == 0 for e in header["tensors"])


def test_container_roundtrip(tmp_path):
    arrays = {"a": np.random.default_rng(0).random((2, 3)), "b": np.arange(5, dtype=np.int64), "c": np.zeros(0, np.uint8)}
    meta, back = read_container(write_container(tmp_path / "c.icft", "k", {"m": [1, 2]}, arrays), kind="k")
    assert meta == {"m": [1, 2]}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])


def test_bad_magic_and_kind(tmp_path):
    p = tmp_path / "bad.icft"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ContainerError, match="magic"):
        read_container(p)
    good = write_container(tmp_path / "g.icft", "dataset", {}, {})
    with pytest.raises(ContainerError, match="checkpoint"):
        read_container(good, kind="checkpoint")


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_inputs):
    path = save_checkpoint(tmp_path / "m.icft", tiny_model, {"note": "x"})
    model, meta = load_checkpoint(path)
    assert meta["note"] == "x" and meta["rope"] == tiny_model.cfg.rope.to_dict()
    assert torch.equal(model(*tiny_inputs), tiny_model(*tiny_inputs))


def test_checkpoint_double_roundtrip(tmp_path, tiny_model):
    tiny_model.double()
    model, _ = load_checkpoint(save_checkpoint(tmp_path / "m.icft", tiny_model))
    assert next(model.parameters()).dtype == torch.float64


def test_rope_mismatch_is_hard_error(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "m.icft", tiny_model)
    meta, arrays = read_container(path)
    meta["rope"]["base_freq"] = 500.0
    write_container(path, "checkpoint", meta, arrays)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path)


def test_expected_config_mismatch(tmp_path, tiny_model, tiny_cfg):
    path = save_checkpoint(tmp_path / "m.icft", tiny_model)
    from dataclasses import replace

    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_config=replace(tiny_cfg, depth_single=3))


def test_write_error_has_path(tmp_path):
    target = tmp_path / "dir"
    target.mkdir()
    with pytest.raises(ContainerError, match="dir"):
        write_container(target, "k", {}, {})
