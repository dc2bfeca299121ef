"""Flat little-endian tensor container shared by checkpoints and feature caches.

Layout::

    magic (8 bytes) | version u32 | meta_len u32 | meta (UTF-8 JSON)
    count u32 | count x tensor record

    tensor record: name_len u16 | name | dtype u8 | ndim u8 | dims u32 x ndim | payload
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, UnsupportedFormatError

VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def dumps(magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    assert len(magic) == 8
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [magic, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        code = _CODES.get(le.str)
        if code is None:
            raise UnsupportedFormatError(f"cannot store dtype {arr.dtype} for {name!r}")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated container: wanted {n} bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(magic: bytes, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(8) != magic:
        raise FormatError(f"bad magic, expected {magic!r}", 0)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedFormatError(f"container version {version} (supported: {VERSION})")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        offset = r.pos
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise UnsupportedFormatError(f"unknown dtype code {code} for {name!r}")
        dtype = _DTYPES[code]
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes)
        try:
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        except ValueError as exc:
            raise FormatError(f"tensor {name!r}: {exc}", offset) from None
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return meta, tensors
