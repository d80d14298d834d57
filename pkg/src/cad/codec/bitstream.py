"""On-disk bitstream container.

Layout (little-endian)::

    magic "CADB" | version u8 | model_id u16 | lambda_index u8 |
    orig_H u16 | orig_W u16 | padded_H u16 | padded_W u16 |
    z_len u32 | y_len u32 | crc32(z bytes + y bytes) u32 | z bytes | y bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from cad.errors import CorruptStreamError

MAGIC = b"CADB"
VERSION = 1
_HEADER = struct.Struct("<4sBHBHHHHIII")
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class BitstreamHeader:
    model_id: int
    lambda_index: int
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    version: int = VERSION


@dataclass(frozen=True)
class Bitstream:
    header: BitstreamHeader
    z_payload: bytes
    y_payload: bytes

    def to_bytes(self) -> bytes:
        h = self.header
        payload = self.z_payload + self.y_payload
        head = _HEADER.pack(MAGIC, h.version, h.model_id, h.lambda_index,
                            h.orig_h, h.orig_w, h.padded_h, h.padded_w,
                            len(self.z_payload), len(self.y_payload), zlib.crc32(payload))
        return head + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise CorruptStreamError("stream shorter than its header")
        (magic, version, model_id, lambda_index, oh, ow, ph, pw,
         z_len, y_len, crc) = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported version {version}")
        payload = data[HEADER_BYTES:]
        if len(payload) != z_len + y_len:
            raise CorruptStreamError(
                f"payload length {len(payload)} does not match header ({z_len}+{y_len})")
        if zlib.crc32(payload) != crc:
            raise CorruptStreamError("payload checksum mismatch")
        header = BitstreamHeader(model_id, lambda_index, oh, ow, ph, pw, version)
        return cls(header, payload[:z_len], payload[z_len:])

    @property
    def num_bits(self) -> int:
        return 8 * (HEADER_BYTES + len(self.z_payload) + len(self.y_payload))

    @property
    def bpp(self) -> float:
        return self.num_bits / (self.header.orig_h * self.header.orig_w)
