"""GZT1 binary tensor files.

Layout: the magic bytes ``GZT1``, a little-endian u32 rank, ``rank`` u32
dimensions, then the row-major float32 little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"GZT1"


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: not a GZT1 file (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise FormatError(f"{source}: truncated GZT1 header (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) != offset + 4 * count:
        raise FormatError(
            f"{source}: GZT1 payload has {len(blob) - offset} bytes, expected {4 * count} for shape {dims}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=offset, count=count).reshape(dims).astype(np.float32)


def save(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), source=os.fspath(path))
