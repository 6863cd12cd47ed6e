"""Canonical byte encoding primitives.

Deterministic tag-length-value: integers are big-endian fixed width, byte
strings and sequences are length-prefixed, nothing floating-point goes on
the wire.  Encoders are injective so signatures over encodings are
unambiguous.
"""

from __future__ import annotations


class DecodeError(Exception):
    """Input bytes do not form a valid canonical encoding."""


def u8(v: int) -> bytes:
    if not 0 <= v < 1 << 8:
        raise ValueError(f"u8 out of range: {v}")
    return v.to_bytes(1, "big")


def u16(v: int) -> bytes:
    if not 0 <= v < 1 << 16:
        raise ValueError(f"u16 out of range: {v}")
    return v.to_bytes(2, "big")


def u32(v: int) -> bytes:
    if not 0 <= v < 1 << 32:
        raise ValueError(f"u32 out of range: {v}")
    return v.to_bytes(4, "big")


def u64(v: int) -> bytes:
    if not 0 <= v < 1 << 64:
        raise ValueError(f"u64 out of range: {v}")
    return v.to_bytes(8, "big")


def blob(b: bytes) -> bytes:
    """Length-prefixed byte string (u32 length)."""
    return u32(len(b)) + b


def opt_blob(b: bytes | None) -> bytes:
    return b"\x00" if b is None else b"\x01" + blob(b)


class Reader:
    """Sequential reader over a canonical encoding.

    Raises DecodeError on truncation; callers must invoke done() so trailing
    garbage is rejected (needed for encode/decode to be a bijection).
    """

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError("truncated input")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def blob(self) -> bytes:
        return self.take(self.u32())

    def opt_blob(self) -> bytes | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag == 1:
            return self.blob()
        raise DecodeError(f"bad option flag {flag}")

    def done(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError("trailing bytes after message")

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos
