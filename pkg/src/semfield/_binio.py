"""Little-endian binary readers/writers for the on-disk formats.

All multi-byte values in .sfd/.sfm/.sfq files are little-endian regardless
of host byte order; readers therefore always go through explicit '<'
struct formats and '<'-dtyped numpy views, never native dtypes.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from semfield.errors import FormatError

F32LE = np.dtype("<f4")
U32LE = np.dtype("<u4")


class Reader:
    """Tracks the byte offset so format errors can name where they hit."""

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        self.offset = 0

    def read_exact(self, n: int, what: str) -> bytes:
        data = self._fh.read(n)
        if len(data) != n:
            raise FormatError(
                f"truncated file: wanted {n} bytes for {what}, got {len(data)}",
                offset=self.offset,
            )
        self.offset += n
        return data

    def read_struct(self, fmt: str, what: str) -> tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.read_exact(size, what))

    def read_u32(self, what: str) -> int:
        return self.read_struct("<I", what)[0]

    def read_u64(self, what: str) -> int:
        return self.read_struct("<Q", what)[0]

    def read_f32_array(self, count: int, what: str) -> np.ndarray:
        data = self.read_exact(4 * count, what)
        return np.frombuffer(data, dtype=F32LE).astype(np.float32)

    def read_string(self, what: str) -> str:
        length = self.read_u32(f"{what} length")
        raw = self.read_exact(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}: {exc}", offset=self.offset) from exc

    def expect_magic(self, magic: bytes) -> None:
        got = self.read_exact(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic: expected {magic!r}, got {got!r}", offset=0)

    def expect_eof(self) -> None:
        extra = self._fh.read(1)
        if extra:
            raise FormatError("trailing bytes after end of data", offset=self.offset)


class Writer:
    def __init__(self, fh: BinaryIO):
        self._fh = fh

    def write(self, data: bytes) -> None:
        self._fh.write(data)

    def write_struct(self, fmt: str, *values) -> None:
        self._fh.write(struct.pack(fmt, *values))

    def write_u32(self, value: int) -> None:
        self.write_struct("<I", value)

    def write_u64(self, value: int) -> None:
        self.write_struct("<Q", value)

    def write_f32_array(self, arr: np.ndarray) -> None:
        self._fh.write(np.ascontiguousarray(arr, dtype=F32LE).tobytes())

    def write_string(self, text: str) -> None:
        raw = text.encode("utf-8")
        self.write_u32(len(raw))
        self._fh.write(raw)
