"""Binary tensor blob streams.

Layout: the 8-byte magic ``HTRBLOB1``, then one record per tensor::

    u32 name length | UTF-8 name | u32 rank | u64 extents[rank] | f32 elements

All integers and floats are little-endian; elements are row-major.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"HTRBLOB1"


class BlobFormatError(ValueError):
    pass


def write_blob(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_blob(stream: BinaryIO) -> dict[str, np.ndarray]:
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise BlobFormatError(f"bad blob magic {magic!r}")
    out: dict[str, np.ndarray] = {}
    while True:
        head = stream.read(4)
        if not head:
            return out
        if len(head) < 4:
            raise BlobFormatError("truncated record header")
        (n,) = struct.unpack("<I", head)
        name = _read_exact(stream, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(stream, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(shape)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise BlobFormatError(f"truncated blob: wanted {n} bytes, got {len(buf)}")
    return buf


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_blob(buf, tensors)
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    return read_blob(io.BytesIO(data))
