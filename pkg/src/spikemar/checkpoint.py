"""Single-file checkpoints.

Layout::

    b"SPKMARCK"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON manifest (sorted keys)
    payload                     raw little-endian float64 arrays, in manifest order

The manifest holds ``format_version``, the model config, free-form ``meta``
and one entry per tensor: ``name``, ``shape``, ``dtype`` (always ``"<f8"``),
``offset`` and ``nbytes`` relative to the payload start. Tensors are written
in sorted-name order, so equal parameters give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .numerics import Tensor

MAGIC = b"SPKMARCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig, meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(8) != MAGIC:
        raise CheckpointError(f"{path}: not a spikemar checkpoint")
    (hlen,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def load_checkpoint(path, requires_grad: bool = True):
    """Return ``(params, config, meta)``."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    params = {}
    for e in header["tensors"]:
        if e["dtype"] != "<f8":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']}")
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        params[e["name"]] = Tensor(arr, requires_grad=requires_grad)
    return params, ModelConfig.from_dict(header["config"]), header.get("meta", {})
