import socket
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from solvis.errors import FrameTooLarge, FrameTruncated, ProtocolError, UnknownKind
from solvis.orchestrator import protocol as proto
from solvis.orchestrator.protocol import Kind, Pattern, ProtocolMessage, decode_message, encode_message

messages = st.builds(ProtocolMessage, st.sampled_from(Kind), st.integers(0, 2 ** 32 - 1),
                     st.binary(max_size=2048))


@given(messages)
def test_round_trip(m):
    frame = encode_message(m)
    assert decode_message(frame) == m
    length, kind, seq = struct.unpack(">IBI", frame[:9])
    assert (length, kind, seq) == (len(m.payload) + 5, int(m.kind), m.seq)


def test_display_set_layout():
    frame = encode_message(proto.display_set(1, Pattern.WHITE))
    assert frame == b"\x00\x00\x00\x06\x01\x00\x00\x00\x01\x00"
    assert len(frame) == 10


def test_large_image_length_field():
    payload = bytes(1 << 20)
    frame = encode_message(proto.capture_img(7, payload))
    assert struct.unpack(">I", frame[:4])[0] == (1 << 20) + 5
    assert decode_message(frame).payload == payload


def test_size_limit():
    with pytest.raises(FrameTooLarge):
        encode_message(ProtocolMessage(Kind.CAPTURE_IMG, 1, bytes(101)), max_payload=100)
    frame = encode_message(ProtocolMessage(Kind.CAPTURE_IMG, 1, bytes(101)))
    with pytest.raises(FrameTooLarge):
        decode_message(frame, max_payload=100)


@pytest.mark.parametrize("frame, error", [
    (b"", FrameTruncated),
    (b"\x00\x00\x00\x05\x01\x00\x00", FrameTruncated),
    (b"\x00\x00\x00\x07\x01\x00\x00\x00\x01\xff", FrameTruncated),
    (b"\x00\x00\x00\x04\x01\x00\x00\x00\x01", FrameTruncated),
    (b"\x00\x00\x00\x05\x09\x00\x00\x00\x01", UnknownKind),
    (b"\x00\x00\x00\x05\x00\x00\x00\x00\x01", UnknownKind),
    (b"\x00\x00\x00\x05\x01\x00\x00\x00\x01\x00", ProtocolError),
])
def test_malformed_frames(frame, error):
    with pytest.raises(error):
        decode_message(frame)


def test_fuzz_decoder_never_crashes():
    rng = np.random.default_rng(2024)
    valid = [encode_message(proto.display_set(3, Pattern.CHECK)), encode_message(proto.capture_req(9)),
             encode_message(proto.analyze_result(4, "Pass", {"a": 1.0}))]
    outcomes = {"ok": 0, "error": 0}
    for i in range(100_000):
        if i % 2:
            data = rng.integers(0, 256, int(rng.integers(0, 24)), dtype=np.uint8).tobytes()
        else:
            # mutate a valid frame so the header often parses
            data = bytearray(valid[i % 3])
            for _ in range(int(rng.integers(1, 4))):
                data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
            data = bytes(data[:int(rng.integers(0, len(data) + 1))])
        try:
            m = decode_message(data)
        except ProtocolError:
            outcomes["error"] += 1
        else:
            assert encode_message(m) == data
            outcomes["ok"] += 1
    assert outcomes["ok"] > 0 and outcomes["error"] > 0


def test_payload_helpers():
    assert proto.parse_pattern(proto.display_ack(2, Pattern.CHECK)) is Pattern.CHECK
    with pytest.raises(ProtocolError):
        proto.parse_pattern(ProtocolMessage(Kind.DISPLAY_ACK, 2, b"\x05"))
    label, features = proto.parse_result(proto.analyze_result(3, "Fail2", {"superposition_ratio": 0.5}))
    assert (label, features) == ("Fail2", {"superposition_ratio": 0.5})
    with pytest.raises(ProtocolError):
        proto.parse_result(ProtocolMessage(Kind.ANALYZE_RESULT, 3, b"\xff"))
    assert proto.parse_error(proto.error(4, 7, "no flask")) == (7, "no flask")
    with pytest.raises(ProtocolError):
        proto.parse_error(ProtocolMessage(Kind.ERROR, 4, b"\x01"))


def test_seq_range():
    with pytest.raises(ValueError):
        ProtocolMessage(Kind.CAPTURE_REQ, -1)
    with pytest.raises(ValueError):
        ProtocolMessage(Kind.CAPTURE_REQ, 2 ** 32)


def test_socket_read_and_timeout():
    a, b = socket.socketpair()
    with a, b:
        m = proto.capture_img(5, b"png-bytes")
        frame = encode_message(m)
        # split delivery still yields one message
        a.sendall(frame[:4])
        a.sendall(frame[4:])
        assert proto.read_message(b, timeout=1.0) == m
        with pytest.raises(socket.timeout):
            proto.read_message(b, timeout=0.05)
        a.sendall(frame[:12])
        a.close()
        with pytest.raises(FrameTruncated):
            proto.read_message(b, timeout=1.0)
