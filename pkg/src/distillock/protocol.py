"""Length-prefixed binary envelopes exchanged by user, enclave and worker.

Envelope layout (little-endian)::

    magic "DLP1" | msg_type u8 | session_id u64 | payload_len u32 | payload

Payloads per message type are documented on each message class. Floats on the
wire are always float64.
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DLP1"
HEADER = struct.Struct("<4sBQI")
MAX_PAYLOAD = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    TOKEN_IDS = 1
    ENCRYPTED_INPUT = 2
    EMBED_REPLY = 3
    AUTHORIZED_INPUT = 4
    LOGITS = 5
    ERROR = 6
    HELLO = 7


class ErrorCode(enum.IntEnum):
    TRUNCATED = 1
    BAD_MAGIC = 2
    UNKNOWN_TYPE = 3
    NNZ_EXCEEDS_VOCAB = 4
    INDEX_OUT_OF_RANGE = 5
    UNSORTED_INDICES = 6
    NON_FINITE = 7
    TRAILING_BYTES = 8
    BAD_UTF8 = 9
    PAYLOAD_TOO_LARGE = 10
    # service-level
    WRONG_STATE = 20
    SESSION_REUSED = 21
    FINGERPRINT_MISMATCH = 22
    UNEXPECTED_MESSAGE = 23
    DIM_MISMATCH = 24
    TOKEN_OUT_OF_RANGE = 25
    PADS_EXHAUSTED = 26
    INTERNAL = 99


class ProtocolError(Exception):
    def __init__(self, code: ErrorCode, detail: str = ""):
        super().__init__(f"{code.name}: {detail}" if detail else code.name)
        self.code = ErrorCode(code)
        self.detail = detail


def _f64_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return a.shape == b.shape and a.view(np.uint64).tobytes() == b.view(np.uint64).tobytes()


@dataclass(eq=False)
class TokenIds:
    """``count u32, ids u32[count]`` (user → enclave)."""

    ids: np.ndarray

    msg_type = MsgType.TOKEN_IDS

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __eq__(self, other):
        return type(other) is TokenIds and np.array_equal(self.ids, other.ids)


@dataclass(eq=False)
class EncryptedInput:
    """``seq_len u32``, then per row ``nnz u32, (index u32, value f64)[nnz]`` (enclave → worker)."""

    indices: list[np.ndarray]
    values: list[np.ndarray]

    msg_type = MsgType.ENCRYPTED_INPUT

    def __post_init__(self):
        self.indices = [np.asarray(r, dtype=np.int64).reshape(-1) for r in self.indices]
        self.values = [np.asarray(r, dtype=np.float64).reshape(-1) for r in self.values]
        if len(self.indices) != len(self.values) or any(
            i.shape != v.shape for i, v in zip(self.indices, self.values)
        ):
            raise ValueError("indices and values must align row by row")

    @property
    def seq_len(self) -> int:
        return len(self.indices)

    def densify(self, vocab_size: int) -> np.ndarray:
        out = np.zeros((self.seq_len, vocab_size))
        for r, (i, v) in enumerate(zip(self.indices, self.values)):
            out[r, i] = v
        return out

    def __eq__(self, other):
        return (
            type(other) is EncryptedInput
            and self.seq_len == other.seq_len
            and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices))
            and all(_f64_equal(a, b) for a, b in zip(self.values, other.values))
        )


@dataclass(eq=False)
class _Dense:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("dense payload must be 2-D")

    def __eq__(self, other):
        return type(other) is type(self) and _f64_equal(self.data, other.data)


class EmbedReply(_Dense):
    """``seq_len u32, d u32, f64[seq_len*d]`` carrying ``(h + m) W_emb`` (worker → enclave)."""

    msg_type = MsgType.EMBED_REPLY


class AuthorizedInput(_Dense):
    """``seq_len u32, d u32, f64[seq_len*d]`` carrying ``x π`` (enclave → worker)."""

    msg_type = MsgType.AUTHORIZED_INPUT


class Logits(_Dense):
    """``seq_len u32, V u32, f64[seq_len*V]`` (worker → user)."""

    msg_type = MsgType.LOGITS


@dataclass
class ErrorMsg:
    """``code u16, detail utf-8`` (to the end of the payload)."""

    code: int
    detail: str = ""

    msg_type = MsgType.ERROR


@dataclass
class Hello:
    """``fingerprint u64``. Request with fingerprint 0; the reply carries the peer's secret fingerprint."""

    fingerprint: int = 0

    msg_type = MsgType.HELLO


Message = TokenIds | EncryptedInput | EmbedReply | AuthorizedInput | Logits | ErrorMsg | Hello


@dataclass
class Envelope:
    session_id: int
    body: Message


# --------------------------------------------------------------------------- encode


def _dense_payload(data: np.ndarray) -> bytes:
    r, c = data.shape
    return struct.pack("<II", r, c) + np.ascontiguousarray(data, dtype="<f8").tobytes()


def _u32_array(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise ValueError(f"{what} do not fit in u32")
    return arr


def encode_payload(body: Message) -> bytes:
    if isinstance(body, TokenIds):
        _u32_array(body.ids, "token ids")
        return struct.pack("<I", body.ids.size) + body.ids.astype("<u4").tobytes()
    if isinstance(body, EncryptedInput):
        parts = [struct.pack("<I", body.seq_len)]
        for idx, val in zip(body.indices, body.values):
            _u32_array(idx, "sparse indices")
            rec = np.empty(idx.size, dtype=[("i", "<u4"), ("v", "<f8")])
            rec["i"] = idx
            rec["v"] = val
            parts.append(struct.pack("<I", idx.size))
            parts.append(rec.tobytes())
        return b"".join(parts)
    if isinstance(body, _Dense):
        return _dense_payload(body.data)
    if isinstance(body, ErrorMsg):
        return struct.pack("<H", body.code) + body.detail.encode("utf-8")
    if isinstance(body, Hello):
        return struct.pack("<Q", body.fingerprint)
    raise TypeError(f"cannot encode {type(body).__name__}")


def encode(env: Envelope) -> bytes:
    payload = encode_payload(env.body)
    return HEADER.pack(MAGIC, int(env.body.msg_type), env.session_id, len(payload)) + payload


# --------------------------------------------------------------------------- decode


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.off + n > len(self.buf):
            raise ProtocolError(ErrorCode.TRUNCATED, f"need {n} bytes at offset {self.off}, have {len(self.buf) - self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.off


def _finite(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ProtocolError(ErrorCode.NON_FINITE, "non-finite float in payload")
    return arr


def _decode_dense(r: _Reader, cls):
    rows, cols = r.u32(), r.u32()
    need = 8 * rows * cols
    if need > r.remaining:
        raise ProtocolError(ErrorCode.TRUNCATED, f"dense {rows}x{cols} needs {need} bytes, have {r.remaining}")
    data = np.frombuffer(r.take(need), dtype="<f8").astype(np.float64).reshape(rows, cols)
    return cls(_finite(data))


def decode_payload(msg_type: int, payload, vocab_size: int | None = None) -> Message:
    r = _Reader(memoryview(payload))
    if msg_type == MsgType.TOKEN_IDS:
        count = r.u32()
        if 4 * count > r.remaining:
            raise ProtocolError(ErrorCode.TRUNCATED, f"{count} ids declared, {r.remaining} bytes left")
        ids = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
        if vocab_size is not None and ids.size and ids.max() >= vocab_size:
            raise ProtocolError(ErrorCode.INDEX_OUT_OF_RANGE, f"token id >= {vocab_size}")
        body: Message = TokenIds(ids)
    elif msg_type == MsgType.ENCRYPTED_INPUT:
        seq_len = r.u32()
        if 4 * seq_len > r.remaining:
            raise ProtocolError(ErrorCode.TRUNCATED, f"{seq_len} rows declared, {r.remaining} bytes left")
        indices, values = [], []
        for _ in range(seq_len):
            nnz = r.u32()
            if vocab_size is not None and nnz > vocab_size:
                raise ProtocolError(ErrorCode.NNZ_EXCEEDS_VOCAB, f"nnz={nnz} > V={vocab_size}")
            rec = np.frombuffer(r.take(12 * nnz), dtype=[("i", "<u4"), ("v", "<f8")])
            idx = rec["i"].astype(np.int64)
            val = _finite(rec["v"].astype(np.float64))
            if idx.size > 1 and not (np.diff(idx) > 0).all():
                raise ProtocolError(ErrorCode.UNSORTED_INDICES, "sparse row indices must be strictly ascending")
            if vocab_size is not None and idx.size and idx[-1] >= vocab_size:
                raise ProtocolError(ErrorCode.INDEX_OUT_OF_RANGE, f"index {idx[-1]} >= V={vocab_size}")
            indices.append(idx)
            values.append(val)
        body = EncryptedInput(indices, values)
    elif msg_type == MsgType.EMBED_REPLY:
        body = _decode_dense(r, EmbedReply)
    elif msg_type == MsgType.AUTHORIZED_INPUT:
        body = _decode_dense(r, AuthorizedInput)
    elif msg_type == MsgType.LOGITS:
        body = _decode_dense(r, Logits)
    elif msg_type == MsgType.ERROR:
        (code,) = struct.unpack("<H", r.take(2))
        try:
            detail = bytes(r.take(r.remaining)).decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError(ErrorCode.BAD_UTF8, "error detail is not utf-8") from None
        body = ErrorMsg(code, detail)
    elif msg_type == MsgType.HELLO:
        body = Hello(struct.unpack("<Q", r.take(8))[0])
    else:
        raise ProtocolError(ErrorCode.UNKNOWN_TYPE, f"message type {msg_type}")
    if r.remaining:
        raise ProtocolError(ErrorCode.TRAILING_BYTES, f"{r.remaining} unread payload bytes")
    return body


def parse_header(header: bytes) -> tuple[int, int, int]:
    """Validate a 17-byte header; returns ``(msg_type, session_id, payload_len)``."""
    if len(header) < HEADER.size:
        raise ProtocolError(ErrorCode.TRUNCATED, f"header needs {HEADER.size} bytes, have {len(header)}")
    magic, msg_type, session_id, payload_len = HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise ProtocolError(ErrorCode.BAD_MAGIC, f"magic {bytes(magic)!r}")
    if msg_type not in MsgType._value2member_map_:
        raise ProtocolError(ErrorCode.UNKNOWN_TYPE, f"message type {msg_type}")
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(ErrorCode.PAYLOAD_TOO_LARGE, f"payload_len {payload_len}")
    return msg_type, session_id, payload_len


def decode(data: bytes, vocab_size: int | None = None) -> Envelope:
    """Decode exactly one envelope; any defect raises :class:`ProtocolError`."""
    view = memoryview(data)
    msg_type, session_id, payload_len = parse_header(view[: HEADER.size])
    body_bytes = view[HEADER.size :]
    if len(body_bytes) < payload_len:
        raise ProtocolError(ErrorCode.TRUNCATED, f"payload_len {payload_len}, have {len(body_bytes)}")
    if len(body_bytes) > payload_len:
        raise ProtocolError(ErrorCode.TRAILING_BYTES, f"{len(body_bytes) - payload_len} bytes after payload")
    return Envelope(session_id, decode_payload(msg_type, body_bytes, vocab_size))


# --------------------------------------------------------------------------- stream framing


class ConnectionClosed(Exception):
    pass


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionClosed("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    """Read one header plus its declared payload, without validating the contents.

    Framing relies only on the length field, so a malformed message still
    consumes exactly its own bytes and the stream stays in sync.
    """
    header = recv_exact(sock, HEADER.size)
    (payload_len,) = struct.unpack_from("<I", header, 13)
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(ErrorCode.PAYLOAD_TOO_LARGE, f"payload_len {payload_len}")
    return header + recv_exact(sock, payload_len)


def send(sock: socket.socket, env: Envelope) -> None:
    sock.sendall(encode(env))


def request(sock: socket.socket, env: Envelope, vocab_size: int | None = None) -> Envelope:
    """Send one envelope and decode the reply; an ``ErrorMsg`` reply is raised."""
    send(sock, env)
    reply = decode(read_frame(sock), vocab_size)
    if isinstance(reply.body, ErrorMsg):
        try:
            code = ErrorCode(reply.body.code)
        except ValueError:
            code = ErrorCode.INTERNAL
        raise ProtocolError(code, reply.body.detail)
    return reply


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address {addr!r} is not host:port")
    return host or "127.0.0.1", int(port)


def connect(addr: str, timeout: float | None = 30.0) -> socket.socket:
    sock = socket.create_connection(parse_addr(addr), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock
