"""Little-endian record helpers shared by the pack, codebook and index formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


def pack_str(s: str | None) -> bytes:
    raw = b"" if s is None else s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"string too long for u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


class Reader:
    """Sequential cursor over a bytes buffer; every short read is a FormatError."""

    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u16(self) -> int:
        return self.unpack("<H")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64(self) -> int:
        return self.unpack("<Q")[0]

    def string(self) -> str | None:
        n = self.u16()
        if n == 0:
            return None
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 string at offset {self.pos - n}") from exc

    def f32_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)

    def at_end(self) -> bool:
        return self.pos == len(self.buf)
