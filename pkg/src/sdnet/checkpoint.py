"""Binary parameter archive (``.sdnt``).

Layout, all integers little-endian::

    b"SDNT" | u32 version | u32 count
    count x ( u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim | u32 dims[ndim] | f32 payload )
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"SDNT"
VERSION = 1
DTYPE_F32 = 0


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4", order="C")
        if a.ndim > 255:
            raise DataError(f"{name}: too many dimensions ({a.ndim})")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise DataError(f"truncated checkpoint: need {n} bytes", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 16:
        raise DataError(f"checkpoint too short ({len(buf)} bytes)", 0)
    if buf[:4] != MAGIC:
        raise DataError(f"bad checkpoint magic {buf[:4]!r}", 0)
    end = len(buf) - 4
    (crc,) = struct.unpack("<I", buf[end:])
    if zlib.crc32(buf[:end]) != crc:
        raise DataError("checkpoint CRC mismatch", end)
    r = _Reader(buf, end)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}", 4)
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        at = r.pos
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError("parameter name is not UTF-8", at) from None
        at = r.pos
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise DataError(f"{name}: unknown dtype code {dtype}", at)
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size)
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != end:
        raise DataError(f"{end - r.pos} unexpected bytes before CRC", r.pos)
    return state


def save(path, state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(state))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())
