"""SWG1 tensor container.

Layout (all integers unsigned 64-bit little-endian)::

    b"SWG1"
    repeated until EOF:
        name_len, name bytes (utf-8)
        rank, extents[rank]
        payload: prod(extents) float32 little-endian, row-major
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"SWG1"
_U64 = struct.Struct("<Q")


class FormatError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(_U64.pack(len(raw)))
            fh.write(raw)
            fh.write(_U64.pack(arr.ndim))
            for d in arr.shape:
                fh.write(_U64.pack(d))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an SWG1 container")
    out: dict[str, np.ndarray] = {}
    pos = 4

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise FormatError(f"{path}: truncated record header")
        (v,) = _U64.unpack_from(blob, pos)
        pos += 8
        return v

    while pos < len(blob):
        n = u64()
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(blob):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos = end
    return out
