"""Fixed 27-byte little-endian chunk header shared by all transports."""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"GSYN"
WIRE_VERSION = 1
HEADER = struct.Struct("<4sBBQIIBI")
HEADER_LEN = HEADER.size  # 27

MSG_DATA = 1


class TransportError(Exception):
    pass


class PeerClosed(TransportError):
    pass


class HeaderCorrupt(TransportError):
    pass


@dataclass(frozen=True)
class WireHeader:
    msg_type: int
    request_tag: int
    chunk_index: int
    total_chunks: int
    dtype: int
    payload_len: int
    magic: bytes = MAGIC
    version: int = WIRE_VERSION

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, self.version, self.msg_type, self.request_tag,
                           self.chunk_index, self.total_chunks, self.dtype, self.payload_len)

    @classmethod
    def unpack(cls, data) -> "WireHeader":
        if len(data) < HEADER_LEN:
            raise HeaderCorrupt(f"short header: {len(data)} bytes")
        magic, version, msg_type, tag, chunk, total, dtype, plen = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise HeaderCorrupt(f"bad magic {magic!r}")
        if version != WIRE_VERSION:
            raise HeaderCorrupt(f"unsupported wire version {version}")
        return cls(msg_type, tag, chunk, total, dtype, plen, magic, version)
