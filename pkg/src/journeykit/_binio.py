"""Little-endian binary primitives shared by snapshot and checkpoint files."""

from __future__ import annotations

import struct
import sys
from array import array


def f64_bytes(data) -> bytes:
    buf = data if isinstance(data, array) else array("d", data)
    if sys.byteorder == "big":
        buf = array("d", buf)
        buf.byteswap()
    return buf.tobytes()


def f64_from(raw: bytes) -> array:
    buf = array("d")
    buf.frombytes(raw)
    if sys.byteorder == "big":
        buf.byteswap()
    return buf


def pack_i64(value: int) -> bytes:
    return struct.pack("<q", value)


def pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<q", len(raw)) + raw


class Reader:
    """Tracks the byte offset so truncation errors can name it."""

    def __init__(self, fh, error_cls):
        self.fh = fh
        self.offset = 0
        self.error_cls = error_cls

    def take(self, n: int) -> bytes:
        raw = self.fh.read(n)
        if len(raw) != n:
            raise self.error_cls(
                f"truncated file: wanted {n} bytes at offset "
                f"{self.offset}, got {len(raw)}")
        self.offset += n
        return raw

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def f64s(self, count: int) -> array:
        return f64_from(self.take(8 * count))

    def text(self) -> str:
        n = self.i64()
        if n < 0:
            raise self.error_cls(
                f"negative string length at offset {self.offset - 8}")
        return self.take(n).decode("utf-8")

    def expect_eof(self) -> None:
        if self.fh.read(1):
            raise self.error_cls(
                f"trailing bytes after payload at offset {self.offset}")
