"""Named-tensor checkpoint file.

Layout (little-endian)::

    b"NMB1"  u32 count
    repeated count times:
        u16 name_len  name (utf-8)  u8 dtype (0=f32, 1=f64)  u8 rank
        rank x u32 extents  raw row-major payload
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError

MAGIC = b"NMB1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"{name}: name or rank too large for the format")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"bad tensor name: {e}") from None
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise FormatError("trailing bytes after last checkpoint entry")
    return out


def save_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return loads(fh.read())
