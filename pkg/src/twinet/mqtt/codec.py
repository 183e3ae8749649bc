"""Bit-exact encoder/decoder for the MQTT 3.1.1 packet subset.

Pure functions over byte buffers; no shared state. The wire layout follows
MQTT 3.1.1 (fixed header with type nibble and flags, base-128 varint
remaining length, 16-bit big-endian length-prefixed UTF-8 strings), so the
frames stay inspectable with off-the-shelf MQTT tooling.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

from .errors import (
    BadTopicError,
    LengthMismatchError,
    MalformedVarintError,
    TruncatedFrameError,
    UnknownPacketTypeError,
)
from .packets import (
    ConnAck,
    Connect,
    ControlPacket,
    Disconnect,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    SubAck,
    Subscribe,
)

MAX_REMAINING_LENGTH = 268_435_455

_TYPE_CONNECT = 1
_TYPE_CONNACK = 2
_TYPE_PUBLISH = 3
_TYPE_PUBACK = 4
_TYPE_SUBSCRIBE = 8
_TYPE_SUBACK = 9
_TYPE_PINGREQ = 12
_TYPE_PINGRESP = 13
_TYPE_DISCONNECT = 14

_PROTOCOL_NAME = b"\x00\x04MQTT"
_PROTOCOL_LEVEL = 4
_CONNECT_FLAGS = 0x02  # clean session, no will, no auth


def encode_remaining_length(n: int) -> bytes:
    """Encode ``n`` as the minimal base-128 varint with continuation bits."""
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise ValueError(f"remaining length out of range: {n}")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_remaining_length(buf: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode a varint starting at ``offset``; returns (value, bytes consumed)."""
    value = 0
    multiplier = 1
    for i in range(4):
        if offset + i >= len(buf):
            raise TruncatedFrameError("varint truncated")
        byte = buf[offset + i]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, i + 1
        multiplier *= 128
    raise MalformedVarintError("continuation bit set past 4 varint bytes")


def _encode_string(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string exceeds 65535 encoded bytes")
    return struct.pack(">H", len(data)) + data


def _decode_string(buf: bytes, offset: int) -> tuple[str, int]:
    if offset + 2 > len(buf):
        raise TruncatedFrameError("string length prefix truncated")
    (length,) = struct.unpack_from(">H", buf, offset)
    offset += 2
    if offset + length > len(buf):
        raise TruncatedFrameError("string body truncated")
    try:
        text = buf[offset : offset + length].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadTopicError(f"invalid UTF-8 string: {exc}") from exc
    return text, offset + length


def _check_topic_name(topic: str) -> None:
    if not topic:
        raise BadTopicError("topic name must be non-empty")
    if "+" in topic or "#" in topic:
        raise BadTopicError(f"topic name may not contain wildcards: {topic!r}")


def encode_packet(packet: ControlPacket) -> bytes:
    """Encode one control packet to a complete wire frame."""
    if isinstance(packet, Connect):
        body = (
            _PROTOCOL_NAME
            + bytes([_PROTOCOL_LEVEL, _CONNECT_FLAGS])
            + struct.pack(">H", 0)
            + _encode_string(packet.client_id)
        )
        header = _TYPE_CONNECT << 4
    elif isinstance(packet, ConnAck):
        body = bytes([0x00, packet.return_code])
        header = _TYPE_CONNACK << 4
    elif isinstance(packet, Publish):
        _check_topic_name(packet.topic)
        body = _encode_string(packet.topic)
        if packet.qos == 1:
            body += struct.pack(">H", packet.packet_id)
        body += packet.payload
        header = (_TYPE_PUBLISH << 4) | (packet.qos << 1)
    elif isinstance(packet, PubAck):
        body = struct.pack(">H", packet.packet_id)
        header = _TYPE_PUBACK << 4
    elif isinstance(packet, Subscribe):
        if not packet.filters:
            raise ValueError("subscribe requires at least one filter")
        body = struct.pack(">H", packet.packet_id)
        for topic_filter, max_qos in packet.filters:
            body += _encode_string(topic_filter) + bytes([max_qos])
        header = (_TYPE_SUBSCRIBE << 4) | 0x02
    elif isinstance(packet, SubAck):
        body = struct.pack(">H", packet.packet_id) + bytes(packet.granted)
        header = _TYPE_SUBACK << 4
    elif isinstance(packet, PingReq):
        body = b""
        header = _TYPE_PINGREQ << 4
    elif isinstance(packet, PingResp):
        body = b""
        header = _TYPE_PINGRESP << 4
    elif isinstance(packet, Disconnect):
        body = b""
        header = _TYPE_DISCONNECT << 4
    else:
        raise TypeError(f"not a ControlPacket: {packet!r}")
    return bytes([header]) + encode_remaining_length(len(body)) + body


def decode_packet(frame: bytes) -> ControlPacket:
    """Decode exactly one complete frame back into a control packet."""
    if not frame:
        raise TruncatedFrameError("empty input")
    header = frame[0]
    ptype = header >> 4
    flags = header & 0x0F
    remaining, consumed = decode_remaining_length(frame, 1)
    body = frame[1 + consumed :]
    if len(body) != remaining:
        raise LengthMismatchError(
            f"declared {remaining} body bytes, got {len(body)}"
        )
    return _decode_body(ptype, flags, body)


def _decode_body(ptype: int, flags: int, body: bytes) -> ControlPacket:
    if ptype == _TYPE_CONNECT:
        offset = len(_PROTOCOL_NAME) + 2 + 2
        if len(body) < offset or body[: len(_PROTOCOL_NAME)] != _PROTOCOL_NAME:
            raise LengthMismatchError("malformed connect variable header")
        client_id, end = _decode_string(body, offset)
        if end != len(body):
            raise LengthMismatchError("trailing bytes after connect payload")
        return Connect(client_id)
    if ptype == _TYPE_CONNACK:
        if len(body) != 2:
            raise LengthMismatchError("connack body must be 2 bytes")
        return ConnAck(body[1])
    if ptype == _TYPE_PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos not in (0, 1):
            raise UnknownPacketTypeError(f"unsupported publish qos {qos}")
        topic, offset = _decode_string(body, 0)
        _check_topic_name(topic)
        packet_id = None
        if qos == 1:
            if offset + 2 > len(body):
                raise TruncatedFrameError("publish packet id truncated")
            (packet_id,) = struct.unpack_from(">H", body, offset)
            offset += 2
        return Publish(topic, body[offset:], qos, packet_id)
    if ptype == _TYPE_PUBACK:
        if len(body) != 2:
            raise LengthMismatchError("puback body must be 2 bytes")
        return PubAck(struct.unpack(">H", body)[0])
    if ptype == _TYPE_SUBSCRIBE:
        if len(body) < 2:
            raise TruncatedFrameError("subscribe body truncated")
        (packet_id,) = struct.unpack_from(">H", body, 0)
        offset = 2
        filters: list[tuple[str, int]] = []
        while offset < len(body):
            topic_filter, offset = _decode_string(body, offset)
            if offset >= len(body):
                raise TruncatedFrameError("subscribe qos byte missing")
            filters.append((topic_filter, body[offset]))
            offset += 1
        if not filters:
            raise LengthMismatchError("subscribe carries no filters")
        return Subscribe(packet_id, tuple(filters))
    if ptype == _TYPE_SUBACK:
        if len(body) < 2:
            raise TruncatedFrameError("suback body truncated")
        (packet_id,) = struct.unpack_from(">H", body, 0)
        return SubAck(packet_id, tuple(body[2:]))
    if ptype == _TYPE_PINGREQ:
        if body:
            raise LengthMismatchError("pingreq body must be empty")
        return PingReq()
    if ptype == _TYPE_PINGRESP:
        if body:
            raise LengthMismatchError("pingresp body must be empty")
        return PingResp()
    if ptype == _TYPE_DISCONNECT:
        if body:
            raise LengthMismatchError("disconnect body must be empty")
        return Disconnect()
    raise UnknownPacketTypeError(f"unknown packet type nibble {ptype}")


def read_packet(stream: BinaryIO) -> ControlPacket | None:
    """Read one framed packet from a blocking byte stream.

    Returns None on clean EOF at a frame boundary; raises TruncatedFrameError
    on EOF mid-frame.
    """
    first = stream.read(1)
    if not first:
        return None
    varint = bytearray()
    for _ in range(4):
        byte = stream.read(1)
        if not byte:
            raise TruncatedFrameError("EOF inside remaining length")
        varint += byte
        if not byte[0] & 0x80:
            break
    else:
        raise MalformedVarintError("continuation bit set past 4 varint bytes")
    remaining, _ = decode_remaining_length(bytes(varint))
    body = b""
    while len(body) < remaining:
        chunk = stream.read(remaining - len(body))
        if not chunk:
            raise TruncatedFrameError("EOF inside packet body")
        body += chunk
    return decode_packet(first + bytes(varint) + body)
