"""User-side orchestration of the authorised inference handshake.

The user relays four messages::

    TokenIds  → enclave → EncryptedInput
    EncryptedInput → worker → EmbedReply
    EmbedReply → enclave → AuthorizedInput
    AuthorizedInput → worker → Logits

Logits come back from the worker directly; they need no unmasking.
"""
from __future__ import annotations

import itertools
import socket

import numpy as np

from .enclave import Enclave
from .protocol import (
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
    connect,
    decode,
    encode,
    read_frame,
    request,
    send,
)
from .service import respond
from .worker import Worker


def _expect(env: Envelope, cls):
    if isinstance(env.body, ErrorMsg):
        raise ProtocolError(ErrorCode(env.body.code), env.body.detail)
    if not isinstance(env.body, cls):
        raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, f"expected {cls.__name__}, got {type(env.body).__name__}")
    return env.body


class _Pipeline:
    def __init__(self, first_session: int = 1):
        self._ids = itertools.count(first_session)

    def _hop(self, peer: str, env: Envelope) -> Envelope:
        raise NotImplementedError

    def infer(self, token_ids, session_id: int | None = None) -> np.ndarray:
        """Authorised logits ``(seq_len, V)`` for one sequence."""
        sid = next(self._ids) if session_id is None else session_id
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        enc = _expect(self._hop("enclave", Envelope(sid, TokenIds(ids))), EncryptedInput)
        emb = _expect(self._hop("worker", Envelope(sid, enc)), EmbedReply)
        xp = _expect(self._hop("enclave", Envelope(sid, emb)), AuthorizedInput)
        return _expect(self._hop("worker", Envelope(sid, xp)), Logits).data

    def infer_unauthorized(self, token_ids, session_id: int = 0) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        return _expect(self._hop("worker", Envelope(session_id, TokenIds(ids))), Logits).data

    def last_logits(self, batch) -> np.ndarray:
        return np.stack([self.infer(seq)[-1] for seq in np.atleast_2d(batch)])


class LoopbackPipeline(_Pipeline):
    """In-process enclave and worker; every hop still goes through the byte codec.

    ``worker_inbox`` keeps every frame the worker received, for taint checks.
    """

    def __init__(self, enclave: Enclave, worker: Worker, first_session: int = 1, record: bool = False):
        super().__init__(first_session)
        self.enclave, self.worker = enclave, worker
        self.record = record
        self.worker_inbox: list[bytes] = []

    def _hop(self, peer: str, env: Envelope) -> Envelope:
        frame = encode(env)
        if peer == "worker":
            if self.record:
                self.worker_inbox.append(frame)
            reply = respond(self.worker.handle, frame, self.worker.model.config.vocab_size)
        else:
            reply = respond(self.enclave.handle, frame, self.enclave.secret.vocab_size)
        return decode(reply)


class RemotePipeline(_Pipeline):
    """Talks to enclave and worker services over TCP; verifies they are paired."""

    def __init__(self, enclave_addr: str, worker_addr: str, first_session: int = 1, check_pairing: bool = True):
        super().__init__(first_session)
        self._socks: dict[str, socket.socket] = {
            "enclave": connect(enclave_addr),
            "worker": connect(worker_addr),
        }
        if check_pairing:
            fe = request(self._socks["enclave"], Envelope(0, Hello(0))).body.fingerprint
            fw = request(self._socks["worker"], Envelope(0, Hello(0))).body.fingerprint
            if fe != fw:
                self.close()
                raise ProtocolError(ErrorCode.FINGERPRINT_MISMATCH, f"enclave {fe:#018x} != worker {fw:#018x}")

    def _hop(self, peer: str, env: Envelope) -> Envelope:
        sock = self._socks[peer]
        send(sock, env)
        return decode(read_frame(sock))

    def close(self) -> None:
        for s in self._socks.values():
            s.close()

    def __enter__(self) -> "RemotePipeline":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
