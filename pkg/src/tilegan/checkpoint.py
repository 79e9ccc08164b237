"""Self-describing binary container for model checkpoints.

Layout::

    magic  b"TGCKPT01"
    u64    header length (little endian)
    header UTF-8 JSON: format, kind, config, extra, tensor index
    data   raw little-endian tensor bytes at the offsets listed in the index

The file bytes are a pure function of the inputs, so the SHA-256 prefix
used as checkpoint id is stable across identical runs.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError

MAGIC = b"TGCKPT01"
FORMAT = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    extra: dict
    id: str


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(t)


def encode_checkpoint(kind: str, config: dict, tensors: dict, extra: dict | None = None) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT, "kind": kind, "config": config,
                         "extra": extra or {}, "tensors": index}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def checkpoint_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, kind: str, config: dict, tensors: dict, extra: dict | None = None) -> str:
    blob = encode_checkpoint(kind, config, tensors, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return checkpoint_id(blob)


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"checkpoint {path} not found")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + n])
    except ValueError:
        raise DatasetError(f"{path}: corrupt checkpoint header") from None
    if header.get("format") != FORMAT:
        raise DatasetError(f"{path}: unsupported checkpoint format {header.get('format')}")
    if kind is not None and header["kind"] != kind:
        raise DatasetError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    base = 16 + n
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise DatasetError(f"{path}: tensor {entry['name']!r} truncated")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return Checkpoint(header["kind"], header["config"], tensors, header["extra"], checkpoint_id(blob))
