"""Wire framing shared by the TCP and simulated backends.

Header (little-endian, 40 bytes)::

    magic u32 | msg_type u32 | layer u32 | chunk_id u64 | iteration u64 | origin u32 | payload_len u64
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MAGIC = 0x50534442
_HEADER = struct.Struct("<IIIQQIQ")
HEADER_SIZE = _HEADER.size


class FrameError(ValueError):
    pass


class MsgType(enum.IntEnum):
    PUSH_CHUNK = 0
    BROADCAST_CHUNK = 1
    SF_BATCH = 2
    CONTROL = 3
    ONEBIT_PUSH_CHUNK = 4


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    layer: int = 0
    chunk_id: int = 0
    iteration: int = 0
    origin: int = 0
    payload: bytes | None = b""
    # set for size-only frames used by timing simulations (payload is None)
    virtual_len: int = 0

    @property
    def payload_len(self) -> int:
        return self.virtual_len if self.payload is None else len(self.payload)

    @property
    def size(self) -> int:
        return HEADER_SIZE + self.payload_len

    def header(self) -> bytes:
        return _HEADER.pack(MAGIC, int(self.msg_type), self.layer, self.chunk_id,
                            self.iteration, self.origin, self.payload_len)

    def encode(self) -> bytes:
        if self.payload is None:
            raise FrameError("virtual frames have no wire encoding")
        return self.header() + self.payload


def decode_header(buf: bytes) -> tuple[MsgType, int, int, int, int, int]:
    if len(buf) < HEADER_SIZE:
        raise FrameError(f"short header: {len(buf)} bytes")
    magic, msg_type, layer, chunk_id, iteration, origin, plen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic 0x{magic:08x}")
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise FrameError(f"unknown msg_type {msg_type}") from None
    return mt, layer, chunk_id, iteration, origin, plen


def decode(buf: bytes) -> Frame:
    mt, layer, chunk_id, iteration, origin, plen = decode_header(buf)
    payload = bytes(buf[HEADER_SIZE:])
    if len(payload) != plen:
        raise FrameError(f"payload_len {plen} != actual {len(payload)}")
    return Frame(mt, layer, chunk_id, iteration, origin, payload)
