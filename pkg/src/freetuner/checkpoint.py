"""FTCK tensor container.

Layout (all integers little-endian u32, data little-endian f64)::

    b"FTCK" | version | count | count x { name_len | utf-8 name | rank | extents[rank] | data }
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

MAGIC = b"FTCK"
VERSION = 1


def dumps(tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise InvalidArgument("not an FTCK container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise InvalidArgument(f"unsupported FTCK version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(blob):
        raise InvalidArgument("trailing bytes in FTCK container")
    return out


def save(path, tensors: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
