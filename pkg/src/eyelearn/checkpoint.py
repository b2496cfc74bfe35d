"""Versioned binary blobs: a JSON header followed by raw little-endian tensors.

Layout::

    magic  b"ELCK"
    version u16
    header_len u32
    header  UTF-8 JSON (sorted keys): {"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload concatenated tensor bytes

The header is written with sorted keys and tensors in name order, so saving
the same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"ELCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(data: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    if len(data) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    tensors = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise CheckpointError(f"checkpoint truncated inside tensor {e['name']}")
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(_TORCH[e["dtype"]])
    return tensors, header["meta"]


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    return loads(Path(path).read_bytes())
