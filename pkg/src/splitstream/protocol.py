"""Binary framing for the client -> server feature stream.

Frame layout (all integers little-endian)::

    magic "STSL" | version u8 | msg_type u8 | client_id u32 | body_len u32 | body | crc32 u32

The CRC is IEEE CRC-32 over every byte before it.  See PROTOCOL.md for the
body layouts and golden vectors.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigurationError, HandshakeError, NeedMoreBytes, ProtocolError

MAGIC = b"STSL"
VERSION = 1
HEADER = struct.Struct("<4sBBII")
HEADER_LEN = HEADER.size  # 14
CRC = struct.Struct("<I")
MAX_BODY = 2**31
MAX_DIMS = 4


class MsgType(IntEnum):
    HELLO = 1
    FEATURE = 2
    ACK = 3
    DONE = 4


class AckStatus(IntEnum):
    OK = 0
    CONFIG_MISMATCH = 1
    BAD_HELLO = 2


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    client_id: int
    body: bytes = b""


@dataclass(eq=False)
class FeatureRecord:
    """One sample's privacy-layer output; the only sample data that leaves a client."""

    client_id: int
    sample_id: int
    feature: np.ndarray
    label: float
    noise_applied: bool = False

    def __post_init__(self):
        self.feature = np.ascontiguousarray(self.feature, dtype=np.float32)
        self.label = float(np.float32(self.label))

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.sample_id == other.sample_id
            and self.feature.shape == other.feature.shape
            and self.feature.tobytes() == other.feature.tobytes()
            and np.float32(self.label).tobytes() == np.float32(other.label).tobytes()
            and self.noise_applied == other.noise_applied
        )

    __hash__ = None


def encode_frame(frame: Frame) -> bytes:
    if len(frame.body) > MAX_BODY:
        raise ConfigurationError("frame body exceeds 2^31 bytes")
    head = HEADER.pack(MAGIC, VERSION, int(frame.msg_type), frame.client_id, len(frame.body))
    data = head + frame.body
    return data + CRC.pack(zlib.crc32(data))


def decode_frame(buf: bytes | bytearray | memoryview) -> tuple[Frame, int]:
    """Parse one frame from the front of ``buf``; returns (frame, bytes consumed).

    Raises NeedMoreBytes for an incomplete frame and ProtocolError for anything
    malformed.
    """
    if len(buf) < HEADER_LEN:
        raise NeedMoreBytes(f"{len(buf)} of {HEADER_LEN} header bytes")
    magic, version, msg_type, client_id, body_len = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if body_len > MAX_BODY:
        raise ProtocolError(f"body length {body_len} too large")
    total = HEADER_LEN + body_len + CRC.size
    if len(buf) < total:
        raise NeedMoreBytes(f"{len(buf)} of {total} frame bytes")
    (crc,) = CRC.unpack_from(buf, HEADER_LEN + body_len)
    if zlib.crc32(bytes(buf[: HEADER_LEN + body_len])) != crc:
        raise ProtocolError("CRC mismatch")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    return Frame(kind, client_id, bytes(buf[HEADER_LEN : HEADER_LEN + body_len])), total


# --------------------------------------------------------------------------
# bodies

_FEATURE_HEAD = struct.Struct("<QfB")


def feature_body(record: FeatureRecord) -> bytes:
    dims = record.feature.shape
    if not 1 <= len(dims) <= MAX_DIMS:
        raise ConfigurationError(f"feature rank {len(dims)} outside 1..{MAX_DIMS}")
    payload = record.feature.astype("<f4", copy=False).tobytes()
    if len(payload) > MAX_BODY:
        raise ConfigurationError("feature payload exceeds 2^31 bytes")
    return (
        _FEATURE_HEAD.pack(record.sample_id, record.label, len(dims))
        + struct.pack(f"<{len(dims)}I", *dims)
        + payload
        + bytes([1 if record.noise_applied else 0])
    )


def parse_feature(client_id: int, body: bytes) -> FeatureRecord:
    if len(body) < _FEATURE_HEAD.size:
        raise ProtocolError("feature body too short")
    sample_id, label, ndims = _FEATURE_HEAD.unpack_from(body, 0)
    if not 1 <= ndims <= MAX_DIMS:
        raise ProtocolError(f"feature rank {ndims} outside 1..{MAX_DIMS}")
    off = _FEATURE_HEAD.size
    if len(body) < off + 4 * ndims:
        raise ProtocolError("feature body too short for dims")
    dims = struct.unpack_from(f"<{ndims}I", body, off)
    off += 4 * ndims
    count = int(np.prod(dims, dtype=np.int64))
    if len(body) != off + 4 * count + 1:
        raise ProtocolError("feature payload length does not match dims")
    feature = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims)
    flags = body[-1]
    if flags & ~1:
        raise ProtocolError(f"unknown feature flags {flags:#x}")
    return FeatureRecord(client_id, sample_id, feature.astype(np.float32), label, bool(flags & 1))


def encode_record(record: FeatureRecord) -> bytes:
    return encode_frame(Frame(MsgType.FEATURE, record.client_id, feature_body(record)))


def decode_record(data: bytes) -> FeatureRecord:
    """Inverse of ``encode_record`` for one complete frame."""
    try:
        frame, used = decode_frame(data)
    except NeedMoreBytes:
        if len(data) < HEADER_LEN:
            raise
        # a full frame was handed over, so a longer declared body is corruption
        raise ProtocolError("body_len exceeds the frame") from None
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after frame")
    if frame.msg_type is not MsgType.FEATURE:
        raise ProtocolError(f"expected FEATURE frame, got {frame.msg_type.name}")
    return parse_feature(frame.client_id, frame.body)


_HELLO = struct.Struct("<QQH")
_ACK = struct.Struct("<BQ")
_DONE = struct.Struct("<Q")


def hello_frame(client_id: int, config_hash: int, sample_count: int) -> Frame:
    return Frame(MsgType.HELLO, client_id, _HELLO.pack(config_hash, sample_count, 0))


def parse_hello(frame: Frame) -> tuple[int, int]:
    if frame.msg_type is not MsgType.HELLO or len(frame.body) != _HELLO.size:
        raise HandshakeError("malformed HELLO", AckStatus.BAD_HELLO)
    config_hash, count, reserved = _HELLO.unpack(frame.body)
    if reserved:
        raise HandshakeError("reserved HELLO bytes must be zero", AckStatus.BAD_HELLO)
    return config_hash, count


def ack_frame(client_id: int, status: int, next_index: int) -> Frame:
    """``next_index`` counts the client's records the server holds (cumulative)."""
    return Frame(MsgType.ACK, client_id, _ACK.pack(int(status), next_index))


def parse_ack(frame: Frame) -> tuple[int, int]:
    if frame.msg_type is not MsgType.ACK or len(frame.body) != _ACK.size:
        raise ProtocolError("malformed ACK")
    return _ACK.unpack(frame.body)


def done_frame(client_id: int, total: int) -> Frame:
    return Frame(MsgType.DONE, client_id, _DONE.pack(total))


def parse_done(frame: Frame) -> int:
    if frame.msg_type is not MsgType.DONE or len(frame.body) != _DONE.size:
        raise ProtocolError("malformed DONE")
    return _DONE.unpack(frame.body)[0]
