"""Helpers shared by the binary container formats."""

from __future__ import annotations

import struct
from typing import BinaryIO


class FormatError(ValueError):
    """Raised when a binary container is malformed or truncated."""


def read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_struct(fp: BinaryIO, fmt: str) -> tuple:
    return struct.unpack(fmt, read_exact(fp, struct.calcsize(fmt)))


def write_struct(fp: BinaryIO, fmt: str, *values) -> None:
    fp.write(struct.pack(fmt, *values))
