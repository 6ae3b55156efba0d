"""Binary parameter checkpoints.

Layout (little-endian)::

    b"FXDL" | u32 version | u32 array count
    per array: u32 name length | name (utf-8) | u32 rank | u32 extents[rank] | f32 data
    u64 checksum

The checksum is the 8-byte BLAKE2b digest (as u64) of every byte before it.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .autograd import ParamSet

MAGIC = b"FXDL"
VERSION = 1


class CheckpointError(IOError):
    """Corrupt, truncated or incompatible checkpoint file."""


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<Q", _checksum(payload))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError("not an FXDL checkpoint")
    payload, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if _checksum(payload) != stored:
        raise CheckpointError("checksum mismatch (corrupt or truncated file)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", payload, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(payload):
                raise CheckpointError("array data runs past end of file")
            out[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if off != len(payload):
        raise CheckpointError("trailing bytes after last array")
    return out


def save_checkpoint(params: ParamSet | dict, path: str | Path) -> None:
    arrays = {k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else v)
              for k, v in params.items()}
    blob = encode(arrays)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
