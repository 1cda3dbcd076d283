"""Checkpoint file: JSON manifest header + raw little-endian tensor payloads.

Layout: 8-byte little-endian uint64 manifest length, the UTF-8 JSON
manifest, then each tensor's raw bytes at the offsets the manifest
records.  The manifest carries the model config, a tensor directory of
name -> (dtype, shape, offset), and an ``extra`` dict (step counter, RNG
state, anything JSON-serializable).  Roundtrips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import Any

import numpy as np

from .errors import DataError
from .model import ModelConfig
from .tensor import Tensor

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _dtype_tag(dtype: np.dtype) -> str:
    for tag, dt in _DTYPES.items():
        if dt == dtype.newbyteorder("<"):
            return tag
    raise DataError(f"unsupported checkpoint dtype {dtype}")


def save_checkpoint(path: str, config: ModelConfig, tensors: dict[str, np.ndarray],
                    extra: dict[str, Any] | None = None) -> None:
    directory = {}
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        tag = _dtype_tag(arr.dtype)
        directory[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "config": dataclasses.asdict(config),
        "tensors": directory,
        "extra": extra or {},
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataError(f"{path}: truncated checkpoint header")
        (blob_len,) = struct.unpack("<Q", header)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise DataError(f"{path}: truncated manifest")
        manifest = json.loads(blob.decode())
        payload = fh.read()

    config = ModelConfig(**manifest["config"])
    tensors = {}
    for name, meta in manifest["tensors"].items():
        dtype = _DTYPES.get(meta["dtype"])
        if dtype is None:
            raise DataError(f"{path}: unknown dtype tag {meta['dtype']}")
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise DataError(f"{path}: payload too short for tensor {name}")
        tensors[name] = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape).copy()
    return config, tensors, manifest.get("extra", {})


def params_to_tensors(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.items()}


def tensors_to_params(tensors: dict[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
    out = {}
    for name, arr in tensors.items():
        if prefix and not name.startswith(prefix):
            continue
        out[name.removeprefix(prefix)] = Tensor(arr.copy(), requires_grad=True)
    return out
