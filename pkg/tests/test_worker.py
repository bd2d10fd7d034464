import numpy as np
import pytest

from distillock import tensor as T
from distillock.enclave import Enclave, SeededPads
from distillock.model import ModelConfig, embed, forward, init_model
from distillock.obfuscate import gen_secret, min_hot_count, obfuscate_model
from distillock.pipeline import LoopbackPipeline
from distillock.protocol import (
    AuthorizedInput,
    EncryptedInput,
    Envelope,
    ErrorCode,
    Hello,
    ProtocolError,
    TokenIds,
    decode,
)
from distillock.verify import random_config, rel_err
from distillock.worker import Worker, embed_sparse, obf_forward, unauthorized_forward


def _setup(seed=0, cfg=None):
    cfg = cfg or ModelConfig(24, 8, 6, 2, 6, seed=seed)
    plain = init_model(cfg)
    secret = gen_secret(cfg.vocab_size, cfg.model_dim, seed + 1)
    obf = obfuscate_model(plain, secret)
    enclave = Enclave(secret, SeededPads(plain.W_emb, seed=seed))
    return plain, secret, obf, enclave


def test_embed_sparse_matches_dense(rng):
    _, _, obf, _ = _setup()
    for _ in range(50):
        rows = int(rng.integers(1, 5))
        idx = [np.sort(rng.choice(24, size=int(rng.integers(0, 25)), replace=False)) for _ in range(rows)]
        val = [rng.standard_normal(len(i)) for i in idx]
        enc = EncryptedInput(idx, val)
        out = embed_sparse(obf, enc).data
        assert rel_err(out, enc.densify(24) @ obf.W_emb) <= 1e-12


def test_embed_sparse_rejects_out_of_range():
    _, _, obf, _ = _setup()
    with pytest.raises(ProtocolError) as info:
        embed_sparse(obf, EncryptedInput([[30]], [[1.0]]))
    assert info.value.code == ErrorCode.INDEX_OUT_OF_RANGE


def test_obf_forward_on_permuted_embedding():
    plain, secret, obf, _ = _setup()
    ids = [3, 9, 0, 23]
    out = obf_forward(obf, AuthorizedInput(T.apply_cols(embed(plain, ids), secret.pi))).data
    assert rel_err(out, forward(plain, ids)) <= 1e-12
    with pytest.raises(ProtocolError) as info:
        obf_forward(obf, AuthorizedInput(np.zeros((2, 7))))
    assert info.value.code == ErrorCode.DIM_MISMATCH


@pytest.mark.parametrize("seed", range(5))
def test_loopback_pipeline_equivalence(seed):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng)
    plain, _, obf, enclave = _setup(seed, cfg)
    pipe = LoopbackPipeline(enclave, Worker(obf))
    for _ in range(5):
        ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, cfg.max_seq_len + 1)))
        assert rel_err(pipe.infer(ids), forward(plain, ids)) <= 1e-9
    batch = rng.integers(0, cfg.vocab_size, size=(3, cfg.max_seq_len))
    assert rel_err(pipe.last_logits(batch), forward(plain, batch)[:, -1]) <= 1e-9


def test_unauthorized_path_is_scrambled_teacher():
    plain, secret, obf, enclave = _setup()
    ids = [1, 2, 3]
    bad = unauthorized_forward(obf, ids).data
    # Feeding raw ids to the shipped weights equals the plain model with its
    # embedding table row-shuffled by π_emb and un-permuted by π.
    scrambled = plain.copy()
    scrambled.W_emb = T.apply_cols(T.apply_rows(plain.W_emb, secret.pi_emb), secret.pi_inv)
    assert rel_err(bad, forward(scrambled, ids)) <= 1e-12
    assert rel_err(bad, forward(plain, ids)) > 1e-3
    pipe = LoopbackPipeline(enclave, Worker(obf))
    assert np.array_equal(pipe.infer_unauthorized(ids), bad)


def test_worker_refuses_plain_model():
    with pytest.raises(ValueError):
        Worker(init_model(ModelConfig(8, 4, 4, 1, 2)))


def test_fingerprint_mismatch_rejected():
    _, _, obf, enclave = _setup()
    worker = Worker(obf, enclave_fingerprint=enclave.fingerprint ^ 1)
    enc = enclave.authorize(1, [1, 2])
    with pytest.raises(ProtocolError) as info:
        worker.handle(Envelope(1, enc))
    assert info.value.code == ErrorCode.FINGERPRINT_MISMATCH
    assert worker.handle(Envelope(0, Hello(0))).body.fingerprint == obf.secret_fingerprint


def test_mismatched_pipeline_returns_error():
    plain, _, obf, _ = _setup()
    other = Enclave(gen_secret(24, 8, 999), SeededPads(plain.W_emb, seed=0))
    pipe = LoopbackPipeline(other, Worker(obf, enclave_fingerprint=other.fingerprint))
    with pytest.raises(ProtocolError) as info:
        pipe.infer([1, 2])
    assert info.value.code == ErrorCode.FINGERPRINT_MISMATCH


def test_worker_inbox_taint():
    plain, secret, obf, enclave = _setup(3)
    pipe = LoopbackPipeline(enclave, Worker(obf), record=True)
    rng = np.random.default_rng(0)
    k = min_hot_count(24)
    for _ in range(20):
        ids = rng.integers(0, 24, size=5)
        pipe.infer(ids)
    bodies = [decode(f).body for f in pipe.worker_inbox]
    assert not any(isinstance(b, TokenIds) for b in bodies)
    for b in bodies:
        if isinstance(b, EncryptedInput):
            # Every row hides the token among at least k candidates.
            assert all(len(row) >= k for row in b.indices)
        else:
            assert isinstance(b, AuthorizedInput)
    # The worker never sees an unpermuted embedding row.
    plain_rows = {tuple(np.round(r, 12)) for r in plain.W_emb}
    for b in bodies:
        if isinstance(b, AuthorizedInput):
            assert not any(tuple(np.round(r, 12)) in plain_rows for r in b.data)
