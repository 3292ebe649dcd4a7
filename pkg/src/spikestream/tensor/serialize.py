"""SPKT little-endian tensor files.

Layout: b"SPKT", version u32, rank u32, shape u64 * rank, dtype tag u32,
then the row-major payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SPKT"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class FormatError(ValueError):
    pass


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind == "f":
        arr = arr.astype("<f4" if arr.dtype.itemsize == 4 else "<f8")
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype("<i8")
    if arr.dtype not in DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d


def encode(arr: np.ndarray) -> bytes:
    arr = _canonical(arr)
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<I", DTYPE_TAGS[arr.dtype])
    return head + arr.tobytes(order="C")


def decode(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, end offset)."""
    buf = memoryview(buf)
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise FormatError("bad magic, not an SPKT tensor")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported SPKT version {version}")
    pos = offset + 12
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    (tag,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = TAG_DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64))
    end = pos + n * dtype.itemsize
    if end > len(buf):
        raise FormatError("truncated SPKT payload")
    arr = np.frombuffer(buf[pos:end], dtype=dtype).reshape(shape).copy()
    return arr, end


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    try:
        atomic_write_bytes(path, encode(arr))
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc


def load(path: str | os.PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor from {path}: {exc}") from exc
    arr, _ = decode(data)
    return arr


def write_stream(fh: BinaryIO, arr: np.ndarray) -> int:
    data = encode(arr)
    fh.write(data)
    return len(data)
