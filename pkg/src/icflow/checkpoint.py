"""Versioned tensor container shared by checkpoints and datasets.

Byte layout (all integers little-endian)::

    offset 0   4 bytes   magic b"ICFT"
    offset 4   u32       format version (currently 1)
    offset 8   u64       header length N in bytes
    offset 16  N bytes   UTF-8 JSON header
    ...        padding   zero bytes up to the next multiple of 8
    data       blobs     each tensor row-major, little-endian IEEE-754 or
                         two's-complement ints, at header offsets relative
                         to the start of the data section, 8-byte aligned

The header is ``{"kind": str, "meta": {...}, "tensors": [{"name", "dtype",
"shape", "offset", "nbytes"}, ...]}``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .backbone import FlowTransformer, ModelConfig

MAGIC = b"ICFT"
FORMAT_VERSION = 1
_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


class ContainerError(Exception):
    pass


class ConfigMismatchError(ContainerError):
    pass


def _pad(n: int) -> int:
    return (-n) % 8


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype_name} for tensor {name!r}")
        data = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[dtype_name])).tobytes(order="C")
        entries.append({"name": name, "dtype": dtype_name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            fh.write(header)
            fh.write(b"\0" * _pad(16 + len(header)))
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise ContainerError(f"cannot write {path}: {exc}") from exc
    return path


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    start = 16 + hlen + _pad(16 + hlen)
    arrays = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        buf = raw[lo : lo + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(_DTYPES[e["dtype"]])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"], copy=True)
    return header["meta"], arrays


def save_checkpoint(path, model: FlowTransformer, meta: dict[str, Any] | None = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    full_meta = {"config": model.cfg.to_dict(), "rope": model.cfg.rope.to_dict(), **(meta or {})}
    return write_container(path, "checkpoint", full_meta, arrays)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[FlowTransformer, dict]:
    meta, arrays = read_container(path, kind="checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    if meta.get("rope") != cfg.rope.to_dict():
        raise ConfigMismatchError(f"{path}: rotary config {meta.get('rope')} disagrees with model config {cfg.rope.to_dict()}")
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        raise ConfigMismatchError(f"{path}: checkpoint config {cfg.to_dict()} != expected {expected_config.to_dict()}")
    model = FlowTransformer(cfg)
    dtype = None
    state = {}
    for k, v in arrays.items():
        state[k] = torch.from_numpy(v)
        dtype = dtype or state[k].dtype
    model.load_state_dict(state, strict=True)
    if dtype == torch.float64:
        model.double()
    return model, meta
