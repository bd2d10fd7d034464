"""Simulated trusted enclave: holds the secret and pads, authorises inputs.

The enclave never holds full model weights. Its sealed state is the
:class:`PermutationSecret` plus a source of one-time pads whose ``m·W_emb``
products were computed offline by the model owner.
"""
from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .obfuscate import OtpPad, PermutationSecret, _pad_seed, gen_otp, min_hot_count
from .protocol import (
    AuthorizedInput,
    EmbedReply,
    EncryptedInput,
    Envelope,
    ErrorCode,
    Hello,
    ProtocolError,
    TokenIds,
)

log = logging.getLogger(__name__)


class SessionState(enum.Enum):
    AWAIT_TOKENS = "await_tokens"
    SENT_ENCRYPTED = "sent_encrypted"
    DONE = "done"


@dataclass
class AuthSession:
    session_id: int
    pad: OtpPad
    secret: PermutationSecret
    state: SessionState = SessionState.AWAIT_TOKENS
    seq_len: int = 0

    @property
    def vocab_size(self) -> int:
        return self.secret.vocab_size

    @property
    def model_dim(self) -> int:
        return self.secret.model_dim


def _require(session: AuthSession, state: SessionState) -> None:
    if session.state is not state:
        raise ProtocolError(
            ErrorCode.WRONG_STATE, f"session {session.session_id} is {session.state.value}, expected {state.value}"
        )


def authorize_input(session: AuthSession, token_ids) -> EncryptedInput:
    """Mask the one-hot input with the pad and remap indices by π_emb.

    Row ``i`` of the result, densified, equals row ``i`` of ``(h + m) π_emb``:
    a nonzero at vocab index ``c`` lands at column ``π_emb⁻¹[c]``.
    """
    _require(session, SessionState.AWAIT_TOKENS)
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    V = session.vocab_size
    if ids.size == 0:
        raise ProtocolError(ErrorCode.DIM_MISMATCH, "empty token sequence")
    if ids.min() < 0 or ids.max() >= V:
        raise ProtocolError(ErrorCode.TOKEN_OUT_OF_RANGE, f"token id outside [0, {V})")
    if ids.size > session.pad.seq_len:
        raise ProtocolError(ErrorCode.DIM_MISMATCH, f"{ids.size} tokens but pad covers {session.pad.seq_len}")
    session.pad = session.pad.truncated(ids.size)
    inv = session.secret.pi_emb_inv
    indices, values = [], []
    for tok, hot in zip(ids, session.pad.hot):
        merged, counts = np.unique(np.concatenate(([tok], hot)), return_counts=True)
        T.record("pad_union", hot.size + 1)
        cols = inv[merged]
        order = np.argsort(cols, kind="stable")
        indices.append(cols[order])
        values.append(counts[order].astype(np.float64))
    session.seq_len = int(ids.size)
    session.state = SessionState.SENT_ENCRYPTED
    return EncryptedInput(indices, values)


def finalize_input(session: AuthSession, reply: EmbedReply) -> AuthorizedInput:
    """Strip the pad contribution and apply π: ``((h+m)W_emb − mW_emb) π``."""
    _require(session, SessionState.SENT_ENCRYPTED)
    expected = (session.seq_len, session.model_dim)
    if reply.data.shape != expected:
        raise ProtocolError(ErrorCode.DIM_MISMATCH, f"embed reply is {reply.data.shape}, expected {expected}")
    x = T.sub(reply.data, session.pad.mW_emb)
    session.state = SessionState.DONE
    return AuthorizedInput(T.apply_cols(x, session.secret.pi))


def enclave_flop_count(session: AuthSession) -> int:
    """In-enclave FLOPs for a finished session: ``n(k+1)`` pad-union + ``n·d`` subtraction."""
    if session.state is not SessionState.DONE:
        raise ProtocolError(ErrorCode.WRONG_STATE, "session not finished")
    if session.pad.k < 1:
        raise ValueError("pad has no hot indices")
    n = session.seq_len
    return n * (session.pad.k + 1) + n * session.model_dim


# --------------------------------------------------------------------------- pad sources


class PadPool:
    """Pads precomputed offline; each is handed out at most once."""

    def __init__(self, pads: list[OtpPad]):
        self._pads = list(pads)
        self._next = 0
        self._lock = threading.Lock()

    def take(self, session_id: int, seq_len: int) -> OtpPad:
        with self._lock:
            if self._next >= len(self._pads):
                raise ProtocolError(ErrorCode.PADS_EXHAUSTED, "no unused pads left")
            pad = self._pads[self._next]
            self._next += 1
        if pad.seq_len < seq_len:
            raise ProtocolError(ErrorCode.DIM_MISMATCH, f"pads cover {pad.seq_len} positions, {seq_len} requested")
        return OtpPad(session_id, pad.k, pad.hot, pad.mW_emb)


class SeededPads:
    """Pads drawn on demand from ``(seed, session_id)``; needs the plain embedding table."""

    def __init__(self, plain_emb: np.ndarray, seed: int, k: int | None = None):
        self.plain_emb = np.asarray(plain_emb, dtype=np.float64)
        self.seed = seed
        self.k = min_hot_count(self.plain_emb.shape[0]) if k is None else k

    def take(self, session_id: int, seq_len: int) -> OtpPad:
        return gen_otp(self.plain_emb, seq_len, self.k, _pad_seed(self.seed, session_id), session_id=session_id)


class Enclave:
    """Session registry around :func:`authorize_input` / :func:`finalize_input`.

    Secret state is read-only; registry mutation is serialised by a lock so the
    service can run sessions from concurrent connections.
    """

    def __init__(self, secret: PermutationSecret, pads):
        self.secret = secret
        self.pads = pads
        self._sessions: dict[int, AuthSession] = {}
        self._used: set[int] = set()
        self._lock = threading.Lock()

    @property
    def fingerprint(self) -> int:
        return self.secret.fingerprint

    def open_session(self, session_id: int, seq_len: int) -> AuthSession:
        with self._lock:
            if session_id in self._used:
                raise ProtocolError(ErrorCode.SESSION_REUSED, f"session {session_id} already used; pads are one-time")
            self._used.add(session_id)
        pad = self.pads.take(session_id, seq_len)
        session = AuthSession(session_id, pad, self.secret)
        with self._lock:
            self._sessions[session_id] = session
        return session

    def _session(self, session_id: int) -> AuthSession:
        with self._lock:
            s = self._sessions.get(session_id)
        if s is None:
            raise ProtocolError(ErrorCode.WRONG_STATE, f"no open session {session_id}")
        return s

    def authorize(self, session_id: int, token_ids) -> EncryptedInput:
        session = self.open_session(session_id, len(token_ids))
        return authorize_input(session, token_ids)

    def finalize(self, session_id: int, reply: EmbedReply) -> AuthorizedInput:
        session = self._session(session_id)
        out = finalize_input(session, reply)
        with self._lock:
            self._sessions.pop(session_id, None)
        return out

    def handle(self, env: Envelope) -> Envelope:
        body = env.body
        if isinstance(body, Hello):
            return Envelope(env.session_id, Hello(self.fingerprint))
        if isinstance(body, TokenIds):
            return Envelope(env.session_id, self.authorize(env.session_id, body.ids))
        if isinstance(body, EmbedReply):
            return Envelope(env.session_id, self.finalize(env.session_id, body))
        raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, f"enclave does not accept {type(body).__name__}")
