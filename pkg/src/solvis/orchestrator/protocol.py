"""Wire format shared by the server, the display unit and the camera unit.

Frame layout, all integers big-endian::

    u32 length   number of bytes that follow (kind + seq + payload)
    u8  kind
    u32 seq
    payload
"""
from __future__ import annotations

import json
import socket
import struct
import time
from dataclasses import dataclass
from enum import IntEnum

from ..errors import FrameTooLarge, FrameTruncated, ProtocolError, UnknownKind

HEADER = struct.Struct(">IBI")
HEADER_SIZE = HEADER.size  # 9
LENGTH_OVERHEAD = HEADER_SIZE - 4  # kind + seq
MAX_PAYLOAD = 32 * 1024 * 1024
MAX_SEQ = 0xFFFFFFFF


class Kind(IntEnum):
    DISPLAY_SET = 1
    DISPLAY_ACK = 2
    CAPTURE_REQ = 3
    CAPTURE_IMG = 4
    ANALYZE_RESULT = 5
    ERROR = 6


class Pattern(IntEnum):
    WHITE = 0
    CHECK = 1


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    seq: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not 0 <= self.seq <= MAX_SEQ:
            raise ValueError(f"seq {self.seq} out of range")
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))


def encode_message(m: ProtocolMessage, max_payload: int = MAX_PAYLOAD) -> bytes:
    if len(m.payload) > max_payload:
        raise FrameTooLarge(f"payload of {len(m.payload)} bytes exceeds {max_payload}")
    return HEADER.pack(len(m.payload) + LENGTH_OVERHEAD, int(m.kind), m.seq) + m.payload


def _parse_header(header: bytes, max_payload: int) -> tuple[int, Kind, int]:
    length, kind, seq = HEADER.unpack(header)
    if length < LENGTH_OVERHEAD:
        raise FrameTruncated(f"length field {length} shorter than the kind and seq fields")
    if length - LENGTH_OVERHEAD > max_payload:
        raise FrameTooLarge(f"frame announces {length - LENGTH_OVERHEAD} payload bytes, limit {max_payload}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    return length - LENGTH_OVERHEAD, kind, seq


def decode_message(data: bytes, max_payload: int = MAX_PAYLOAD) -> ProtocolMessage:
    """Decode exactly one frame; anything malformed raises a ``ProtocolError``."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise FrameTruncated(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    size, kind, seq = _parse_header(data[:HEADER_SIZE], max_payload)
    body = data[HEADER_SIZE:]
    if len(body) < size:
        raise FrameTruncated(f"payload has {len(body)} of {size} bytes")
    if len(body) > size:
        raise ProtocolError(f"{len(body) - size} trailing bytes after frame")
    return ProtocolMessage(kind, seq, body)


# -- sockets ----------------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int, deadline: float | None) -> bytes:
    chunks = []
    got = 0
    while got < n:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout("deadline passed")
            sock.settimeout(remaining)
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise FrameTruncated(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket, timeout: float | None = None,
                 max_payload: int = MAX_PAYLOAD) -> ProtocolMessage:
    """Read one frame; ``socket.timeout`` propagates if ``timeout`` elapses."""
    deadline = None if timeout is None else time.monotonic() + timeout
    if deadline is None:
        sock.settimeout(None)
    size, kind, seq = _parse_header(_recv_exact(sock, HEADER_SIZE, deadline), max_payload)
    return ProtocolMessage(kind, seq, _recv_exact(sock, size, deadline))


def send_message(sock: socket.socket, m: ProtocolMessage, max_payload: int = MAX_PAYLOAD) -> None:
    sock.settimeout(None)
    sock.sendall(encode_message(m, max_payload))


# -- payloads ---------------------------------------------------------------------

def display_set(seq: int, pattern: Pattern) -> ProtocolMessage:
    return ProtocolMessage(Kind.DISPLAY_SET, seq, bytes([int(pattern)]))


def display_ack(seq: int, pattern: Pattern) -> ProtocolMessage:
    return ProtocolMessage(Kind.DISPLAY_ACK, seq, bytes([int(pattern)]))


def capture_req(seq: int) -> ProtocolMessage:
    return ProtocolMessage(Kind.CAPTURE_REQ, seq)


def capture_img(seq: int, png: bytes) -> ProtocolMessage:
    return ProtocolMessage(Kind.CAPTURE_IMG, seq, png)


def analyze_result(seq: int, label: str, features: dict[str, float]) -> ProtocolMessage:
    body = json.dumps({"label": label, "features": features}, sort_keys=True)
    return ProtocolMessage(Kind.ANALYZE_RESULT, seq, body.encode())


def error(seq: int, code: int, text: str) -> ProtocolMessage:
    return ProtocolMessage(Kind.ERROR, seq, struct.pack(">H", code) + text.encode())


def parse_pattern(m: ProtocolMessage) -> Pattern:
    if len(m.payload) != 1 or m.payload[0] not in (0, 1):
        raise ProtocolError(f"bad pattern payload {m.payload!r}")
    return Pattern(m.payload[0])


def parse_result(m: ProtocolMessage) -> tuple[str, dict[str, float]]:
    try:
        body = json.loads(m.payload.decode())
        return body["label"], body["features"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"bad result payload: {exc}") from exc


def parse_error(m: ProtocolMessage) -> tuple[int, str]:
    if len(m.payload) < 2:
        raise ProtocolError("error payload lacks its code")
    return struct.unpack(">H", m.payload[:2])[0], m.payload[2:].decode(errors="replace")
