import socket
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distillock.protocol import (
    HEADER,
    AuthorizedInput,
    EmbedReply,
    EncryptedInput,
    Envelope,
    ErrorCode,
    ErrorMsg,
    Hello,
    Logits,
    ProtocolError,
    TokenIds,
    decode,
    encode,
    parse_addr,
    read_frame,
    request,
    send,
)
from distillock.service import MessageServer, respond
from distillock.verify import MESSAGE_TYPES, random_message

# TokenIds [3, 17, 4] in session 1, laid out field by field.
EXAMPLE_HEX = (
    "444c5031"  # magic "DLP1"
    "01"  # msg_type TokenIds
    "0100000000000000"  # session_id 1
    "10000000"  # payload_len 16
    "03000000"  # count 3
    "03000000" "11000000" "04000000"  # ids
)


def test_example_vector():
    frame = encode(Envelope(1, TokenIds([3, 17, 4])))
    assert frame.hex() == EXAMPLE_HEX
    assert decode(bytes.fromhex(EXAMPLE_HEX)) == Envelope(1, TokenIds([3, 17, 4]))


def test_smallest_messages():
    assert len(encode(Envelope(0, TokenIds([])))) == 21
    assert len(encode(Envelope(0, TokenIds([0])))) == 25
    assert HEADER.size == 17


def test_encrypted_three_rows_roundtrip():
    msg = EncryptedInput([[0, 5], [1], [2, 3, 9]], [[1.0, 2.0], [-0.5], [1e300, 5e-324, -0.0]])
    back = decode(encode(Envelope(42, msg)), vocab_size=10).body
    assert back == msg
    assert np.signbit(back.values[2][2])


@pytest.mark.parametrize("kind", MESSAGE_TYPES, ids=lambda k: k.__name__)
def test_random_roundtrip_bitwise(kind):
    rng = np.random.default_rng(hash(kind.__name__) % 2**32)
    for _ in range(300):
        env = Envelope(int(rng.integers(0, 2**64, dtype=np.uint64)), random_message(rng, kind))
        frame = encode(env)
        back = decode(frame)
        assert back.session_id == env.session_id and back.body == env.body
        assert encode(back) == frame


floats = st.floats(allow_nan=False, allow_infinity=False)


@given(st.integers(0, 2**64 - 1), st.lists(st.lists(floats, min_size=0, max_size=4), min_size=0, max_size=4))
def test_dense_roundtrip_property(sid, rows):
    width = min((len(r) for r in rows), default=0)
    data = np.array([r[:width] for r in rows], dtype=float).reshape(len(rows), width)
    for cls in (EmbedReply, AuthorizedInput, Logits):
        env = Envelope(sid, cls(data))
        assert decode(encode(env)) == env


@given(st.integers(0, 2**16 - 1), st.text(max_size=30))
def test_error_roundtrip_property(code, text):
    assert decode(encode(Envelope(3, ErrorMsg(code, text)))).body == ErrorMsg(code, text)


def _frame(msg_type: int, payload: bytes, sid: int = 0) -> bytes:
    return HEADER.pack(b"DLP1", msg_type, sid, len(payload)) + payload


@pytest.mark.parametrize(
    "frame,code",
    [
        (b"DLP1\x01", ErrorCode.TRUNCATED),
        (_frame(1, struct.pack("<II", 2, 0)), ErrorCode.TRUNCATED),
        (_frame(1, struct.pack("<I", 0))[:-1], ErrorCode.TRUNCATED),
        (b"XLP1" + _frame(1, struct.pack("<I", 0))[4:], ErrorCode.BAD_MAGIC),
        (_frame(9, b""), ErrorCode.UNKNOWN_TYPE),
        (_frame(2, struct.pack("<II", 1, 11) + b"\0" * 132), ErrorCode.NNZ_EXCEEDS_VOCAB),
        (_frame(2, struct.pack("<IIId", 1, 1, 10, 1.0)), ErrorCode.INDEX_OUT_OF_RANGE),
        (_frame(1, struct.pack("<II", 1, 10)), ErrorCode.INDEX_OUT_OF_RANGE),
        (_frame(2, struct.pack("<IIIdId", 1, 2, 3, 1.0, 2, 1.0)), ErrorCode.UNSORTED_INDICES),
        (_frame(2, struct.pack("<IIIdId", 1, 2, 3, 1.0, 3, 1.0)), ErrorCode.UNSORTED_INDICES),
        (_frame(3, struct.pack("<IId", 1, 1, float("nan"))), ErrorCode.NON_FINITE),
        (_frame(5, struct.pack("<IId", 1, 1, float("inf"))), ErrorCode.NON_FINITE),
        (_frame(7, struct.pack("<QB", 1, 0)), ErrorCode.TRAILING_BYTES),
        (_frame(7, struct.pack("<Q", 1)) + b"\0", ErrorCode.TRAILING_BYTES),
        (_frame(6, struct.pack("<H", 1) + b"\xff\xfe"), ErrorCode.BAD_UTF8),
        (HEADER.pack(b"DLP1", 1, 0, 2**31), ErrorCode.PAYLOAD_TOO_LARGE),
    ],
)
def test_decode_errors(frame, code):
    with pytest.raises(ProtocolError) as info:
        decode(frame, vocab_size=10)
    assert info.value.code == code


def test_encode_rejects_unrepresentable():
    with pytest.raises(ValueError):
        encode(Envelope(0, TokenIds([-1])))
    with pytest.raises(ValueError):
        encode(Envelope(0, TokenIds([2**32])))


def test_fuzz_never_crashes():
    rng = np.random.default_rng(7)
    seeds = [encode(Envelope(i, random_message(rng, t, 16))) for t in MESSAGE_TYPES for i in range(5)]
    for i in range(20_000):
        f = bytearray(seeds[i % len(seeds)])
        op = i % 4
        if op == 0 and len(f) > HEADER.size:
            f[HEADER.size + int(rng.integers(len(f) - HEADER.size))] = int(rng.integers(256))
        elif op == 1:
            f = f[: int(rng.integers(len(f) + 1))]
        elif op == 2:
            f[int(rng.integers(len(f)))] = int(rng.integers(256))
        else:
            f = bytearray(rng.integers(0, 256, size=int(rng.integers(0, 40)), dtype=np.uint8).tobytes())
        try:
            decode(bytes(f), vocab_size=16)
        except ProtocolError as exc:
            assert isinstance(exc.code, ErrorCode)


def test_parse_addr():
    assert parse_addr("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_addr(":81") == ("127.0.0.1", 81)
    with pytest.raises(ValueError):
        parse_addr("localhost")


def test_respond_maps_errors():
    def handler(env):
        raise RuntimeError("boom")

    reply = decode(respond(handler, encode(Envelope(5, Hello(0)))))
    assert reply.session_id == 5 and reply.body.code == ErrorCode.INTERNAL
    reply = decode(respond(handler, b"junk"))
    assert reply.body.code == ErrorCode.TRUNCATED


def test_server_survives_malformed_frames():
    with MessageServer(lambda env: Envelope(env.session_id, Hello(99))) as server:
        with socket.create_connection(parse_addr(server.address)) as sock:
            sock.sendall(_frame(9, b"xyz", sid=4))
            reply = decode(read_frame(sock))
            assert reply.body.code == ErrorCode.UNKNOWN_TYPE and reply.session_id == 4
            # Same connection still serves well-formed requests.
            assert request(sock, Envelope(8, Hello(0))) == Envelope(8, Hello(99))
            send(sock, Envelope(9, TokenIds([1])))
            assert decode(read_frame(sock)).body == Hello(99)


def test_request_raises_on_error_reply():
    def handler(env):
        raise ProtocolError(ErrorCode.WRONG_STATE, "nope")

    with MessageServer(handler) as server, socket.create_connection(parse_addr(server.address)) as sock:
        with pytest.raises(ProtocolError) as info:
            request(sock, Envelope(1, Hello(0)))
        assert info.value.code == ErrorCode.WRONG_STATE
