"""Tiny versioned binary container shared by checkpoints and reference fields.

Layout (little endian)::

    magic    8 bytes
    version  uint32
    hlen     uint32   length of the JSON header in bytes
    header   hlen bytes of UTF-8 JSON
    payload  float64 values, count given by header["n_values"]
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError, VersionMismatchError

_PREFIX = struct.Struct("<8sII")


def pack(magic: bytes, version: int, header: dict, payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    header = dict(header, n_values=int(payload.size))
    hbytes = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(magic, version, len(hbytes)) + hbytes + payload.tobytes()


def unpack(blob: bytes, magic: bytes, version: int) -> tuple[dict, np.ndarray]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file shorter than its fixed prefix", offset=len(blob))
    got_magic, got_version, hlen = _PREFIX.unpack_from(blob, 0)
    if got_magic != magic:
        raise CheckpointError(f"bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if got_version != version:
        raise VersionMismatchError(
            f"format version {got_version} is not supported (expected {version})", offset=8
        )
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError("truncated header", offset=len(blob))
    try:
        header = json.loads(blob[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", offset=start) from None
    body = start + hlen
    n = int(header.get("n_values", -1))
    need = body + 8 * n
    if n < 0 or len(blob) < need:
        raise CheckpointError(f"truncated payload: need {need} bytes, have {len(blob)}", offset=len(blob))
    if len(blob) > need:
        raise CheckpointError("trailing bytes after payload", offset=need)
    payload = np.frombuffer(blob, dtype="<f8", count=n, offset=body).astype(np.float64)
    return header, payload
