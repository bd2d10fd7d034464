"""Untrusted accelerator stand-in running the obfuscated model."""
from __future__ import annotations

import logging
import time

import numpy as np

from . import tensor as T
from .model import ObfuscatedModel, PlainModel, forward, forward_embedded, load_model
from .protocol import (
    AuthorizedInput,
    EmbedReply,
    EncryptedInput,
    Envelope,
    ErrorCode,
    Hello,
    Logits,
    ProtocolError,
    TokenIds,
    connect,
    request,
)
from .service import MessageServer

log = logging.getLogger(__name__)


def embed_sparse(obf: PlainModel, enc: EncryptedInput) -> EmbedReply:
    """Row ``i`` is ``Σ value · W_emb'[index]`` over that row's nonzeros."""
    V = obf.config.vocab_size
    rows = []
    for idx, val in zip(enc.indices, enc.values):
        if idx.size and (idx.min() < 0 or idx.max() >= V):
            raise ProtocolError(ErrorCode.INDEX_OUT_OF_RANGE, f"sparse index outside [0, {V})")
        rows.append(T.gather_sum(obf.W_emb, idx, val))
    return EmbedReply(np.stack(rows) if rows else np.zeros((0, obf.config.model_dim)))


def obf_forward(obf: PlainModel, x_prime: AuthorizedInput) -> Logits:
    """Run the block stack on authorised input; logits come out in true vocab order."""
    x = x_prime.data
    c = obf.config
    if x.shape[1] != c.model_dim or not 1 <= x.shape[0] <= c.max_seq_len:
        raise ProtocolError(ErrorCode.DIM_MISMATCH, f"authorized input is {x.shape}, model_dim={c.model_dim}")
    return Logits(forward_embedded(obf, x))


def unauthorized_forward(obf: PlainModel, token_ids) -> Logits:
    """What a user gets by feeding raw tokens to the shipped weights (no pad, no π)."""
    return Logits(forward(obf, token_ids))


class Worker:
    """Stateless request handler; the model is read-only after construction."""

    def __init__(self, model: ObfuscatedModel, enclave_fingerprint: int | None = None):
        if not model.obfuscated:
            raise ValueError("worker expects an obfuscated model")
        self.model = model
        self.enclave_fingerprint = enclave_fingerprint

    @property
    def fingerprint(self) -> int:
        return self.model.secret_fingerprint

    def _check_pairing(self) -> None:
        if self.enclave_fingerprint is not None and self.enclave_fingerprint != self.fingerprint:
            raise ProtocolError(
                ErrorCode.FINGERPRINT_MISMATCH,
                f"model fingerprint {self.fingerprint:#018x} != enclave {self.enclave_fingerprint:#018x}",
            )

    def handle(self, env: Envelope) -> Envelope:
        body = env.body
        if isinstance(body, Hello):
            return Envelope(env.session_id, Hello(self.fingerprint))
        if isinstance(body, EncryptedInput):
            self._check_pairing()
            return Envelope(env.session_id, embed_sparse(self.model, body))
        if isinstance(body, AuthorizedInput):
            self._check_pairing()
            return Envelope(env.session_id, obf_forward(self.model, body))
        if isinstance(body, TokenIds):
            log.warning("unauthorized raw-token query for session %d: logits will be garbage", env.session_id)
            try:
                return Envelope(env.session_id, unauthorized_forward(self.model, body.ids))
            except ValueError as exc:
                raise ProtocolError(ErrorCode.TOKEN_OUT_OF_RANGE, str(exc)) from None
        raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, f"worker does not accept {type(body).__name__}")


def fetch_fingerprint(addr: str, retries: int = 50, delay: float = 0.1) -> int:
    """Ask a peer (enclave or worker) for its secret fingerprint."""
    last: Exception | None = None
    for _ in range(retries):
        try:
            with connect(addr) as sock:
                return request(sock, Envelope(0, Hello(0))).body.fingerprint
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionError(f"could not reach {addr}: {last}")


def run_worker(listen_addr: str, model_path, enclave_addr: str | None = None) -> MessageServer:
    """Load an obfuscated model file and build (not start) its service."""
    model = load_model(model_path)
    fp = fetch_fingerprint(enclave_addr) if enclave_addr else None
    worker = Worker(model, enclave_fingerprint=fp)
    if fp is not None and fp != worker.fingerprint:
        log.error("worker model does not match the enclave secret; sessions will be rejected")
    return MessageServer(worker.handle, listen_addr, vocab_size=model.config.vocab_size)
