"""Binary array formats used by datasets, checkpoints and embedding dumps.

Single-array files (dataset images and masks)::

    magic   8 bytes   b"MNLARR32"
    rank    uint32
    dims    rank x uint32
    data    prod(dims) x float32, little-endian, C order

Named-array archives (checkpoints, embedding dumps)::

    magic   8 bytes   b"MNLARC64"
    count   uint32
    count x {
        name_len  uint32
        name      name_len bytes, utf-8
        rank      uint32
        dims      rank x uint64
        data      prod(dims) x float64, little-endian, C order
    }
"""

from __future__ import annotations

import io
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import FormatError

ARRAY_MAGIC = b"MNLARR32"
ARCHIVE_MAGIC = b"MNLARC64"


def write_array(path: str | Path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != ARRAY_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}")
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 4 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).copy()


def dumps_archive(arrays: Mapping[str, object]) -> bytes:
    out = io.BytesIO()
    out.write(ARCHIVE_MAGIC)
    out.write(struct.pack("<I", len(arrays)))
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes(order="C"))
    return out.getvalue()


def loads_archive(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != ARCHIVE_MAGIC:
        raise FormatError(f"bad archive magic {buf[:8]!r}")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(buf):
                raise FormatError(f"entry {name!r} runs past end of archive")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
            pos += 8 * n
    except struct.error as exc:
        raise FormatError(f"truncated archive: {exc}") from exc
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry")
    return arrays


def save_archive(path: str | Path, arrays: Mapping[str, object]) -> None:
    Path(path).write_bytes(dumps_archive(arrays))


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    return loads_archive(Path(path).read_bytes())
