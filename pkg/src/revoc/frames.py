"""Length-prefixed binary frames shared by the enclave, contract and ledger."""

from __future__ import annotations

import struct

from .errors import MalformedEncoding


def pack(*fields: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def unpack(data: bytes, count: int | None = None) -> list[bytes]:
    """Split ``data`` into its fields; every byte must be accounted for."""
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedEncoding("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise MalformedEncoding("field runs past end of frame")
        out.append(data[pos:pos + n])
        pos += n
    if count is not None and len(out) != count:
        raise MalformedEncoding(f"expected {count} fields, got {len(out)}")
    return out


def u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def read_u64(b: bytes) -> int:
    if len(b) != 8:
        raise MalformedEncoding("expected 8-byte integer")
    return struct.unpack(">Q", b)[0]
