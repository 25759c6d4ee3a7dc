"""Versioned binary container for named float arrays.

Layout::

    b"FUSEDLM\\0"                 8-byte magic
    uint32 LE                    format version
    uint64 LE                    header length H
    H bytes                      UTF-8 JSON header: kind, config, meta, arrays index
    payload                      concatenated little-endian float64 arrays
    32 bytes                     SHA-256 of every preceding byte

Each arrays-index entry is ``{"name", "shape", "offset", "nbytes"}`` with the
offset relative to the start of the payload. Specialist and fused checkpoints use
the same container; only ``kind`` and the array names differ.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"FUSEDLM\0"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_arrays(path: str | os.PathLike, kind: str, config: dict, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: the file appears complete under ``path`` or not at all."""
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=_LE_F64)
        raw = a.tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "config": config, "meta": meta or {}, "arrays": index}, sort_keys=True
    ).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(body)
            f.write(digest)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def load_arrays(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; raises CheckpointError on any corruption."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    payload = memoryview(body)[start + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=_LE_F64).reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
