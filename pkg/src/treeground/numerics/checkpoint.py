"""ITGW parameter checkpoints.

Layout (all integers little-endian)::

    b"ITGW" | version u16 | count u32 |
    per parameter: name_len u32 | name utf-8 | rank u32 | dims u32*rank | data f64*prod(dims)

Parameters are written in the order given; readers preserve it.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from treeground.errors import DataError

MAGIC = b"ITGW"
VERSION = 1


def encode_params(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError(f"bad checkpoint magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataError(f"truncated checkpoint at offset {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = read("<HI")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = read("<I")
        if pos + n > len(blob):
            raise DataError(f"truncated checkpoint at offset {pos}")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = read("<I")
        dims = read(f"<{rank}I") if rank else ()
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise DataError(f"truncated checkpoint at offset {pos} (parameter {name!r})")
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"trailing bytes in checkpoint after offset {pos}")
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_params(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())
