"""Little-endian binary building blocks for the model, codebook and gallery files.

Every file starts with a 4-byte magic and a u32 format version. Arrays are
written as ``u32 ndim, u32 dims..., f64 data`` in row-major order; strings as
``u32 byte length`` followed by UTF-8.
"""
from __future__ import annotations

import io
import struct

import numpy as np


class FormatError(ValueError):
    pass


class Writer:
    def __init__(self):
        self._buf = io.BytesIO()

    def u32(self, v: int) -> None:
        self._buf.write(struct.pack("<I", int(v)))

    def f64(self, v: float) -> None:
        self._buf.write(struct.pack("<d", float(v)))

    def raw(self, b: bytes) -> None:
        self._buf.write(b)

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def array(self, a) -> None:
        arr = np.ascontiguousarray(a, dtype="<f8")
        self.u32(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self.raw(arr.tobytes(order="C"))

    def section(self, payload: bytes) -> None:
        self.u32(len(payload))
        self.raw(payload)

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._data):
            raise FormatError("unexpected end of data")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def raw_all(self) -> bytes:
        return self.raw(len(self._data) - self._pos)

    def string(self) -> str:
        return self.raw(self.u32()).decode("utf-8")

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        buf = self.raw(8 * count)
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    def section(self) -> "Reader":
        return Reader(self.raw(self.u32()))

    def at_end(self) -> bool:
        return self._pos == len(self._data)


def write_header(w: Writer, magic: bytes, version: int) -> None:
    w.raw(magic)
    w.u32(version)


def read_header(r: Reader, magic: bytes, supported: int) -> int:
    got = r.raw(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != supported:
        raise FormatError(f"unsupported format version {version}")
    return version
