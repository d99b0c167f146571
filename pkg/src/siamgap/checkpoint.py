"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"SGAPCKPT"
    bytes 8..11   uint32 format version (1)
    bytes 12..19  uint64 header length H
    next H bytes  UTF-8 JSON header (sorted keys)
    remainder     tensor blobs, float64 little-endian, C order, concatenated

The header holds ``model_config``, ``normalization`` ({"mean", "std"}),
``epoch``, ``rng_state``, an optional ``extra`` dict, and ``tensors``: a list
of ``{"name", "kind", "shape", "dtype": "<f8", "offset", "nbytes"}`` where
``offset`` counts from the start of the blob section. Output bytes depend
only on the contents, so identical runs give identical digests.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, SiameseGapModel, build_model

MAGIC = b"SGAPCKPT"
VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def to_bytes(model: SiameseGapModel, epoch=0, rng_state=None, extra=None):
    entries, blobs, offset = [], [], 0
    arrays = [(n, "param", p.data) for n, p in model.params.items()]
    arrays += [(n, "buffer", a) for n, a in model.named_buffers().items()]
    for name, kind, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "kind": kind, "shape": list(arr.shape), "dtype": "<f8",
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "siamgap-checkpoint",
        "model_config": model.config.to_dict(),
        "normalization": {"mean": float(model.input_mean), "std": float(model.input_std)},
        "epoch": int(epoch),
        "rng_state": _jsonable(rng_state),
        "extra": _jsonable(extra or {}),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes, *blobs])


def from_bytes(data: bytes):
    """Return ``(model, header)``."""
    if data[:8] != MAGIC:
        raise DataError("not a siamgap checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    body = memoryview(data)[20 + hlen:]
    config = ModelConfig.from_dict(header["model_config"])
    model = build_model(config, init_seed=0)
    arrays = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"])
    model.load_arrays(arrays)
    model.input_mean = header["normalization"]["mean"]
    model.input_std = header["normalization"]["std"]
    return model, header


def save(path, model, epoch=0, rng_state=None, extra=None):
    data = to_bytes(model, epoch, rng_state, extra)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
