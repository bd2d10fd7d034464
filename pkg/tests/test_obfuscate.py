import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distillock import tensor as T
from distillock.model import FormatError, ModelConfig, forward_embedded, init_model
from distillock.obfuscate import (
    PermutationSecret,
    deobfuscate_model,
    fingerprint,
    gen_otp,
    gen_pad_pool,
    gen_secret,
    guess_probability,
    identity_secret,
    log_guess_probability,
    min_hot_count,
    obfuscate_model,
    pads_from_bytes,
    pads_to_bytes,
    secret_from_bytes,
    secret_to_bytes,
)


def min_hot_oracle(V: int) -> int:
    # Smallest k with V**k >= 2**V, in exact integer arithmetic.
    k = 1
    while V**k < 2**V:
        k += 1
    return k


def test_gen_secret_deterministic_and_valid():
    a, b = gen_secret(50, 12, 9), gen_secret(50, 12, 9)
    assert a == b
    assert sorted(a.pi_emb) == list(range(50)) and sorted(a.pi) == list(range(12))
    assert a != gen_secret(50, 12, 10)
    assert a.fingerprint == fingerprint(9, 50, 12)
    with pytest.raises(ValueError):
        gen_secret(1, 4, 0)


def test_gen_secret_uniform_d5():
    counts = Counter(tuple(gen_secret(2, 5, seed).pi) for seed in range(10_000))
    assert len(counts) == 120
    expected = 10_000 / 120
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    # Wilson-Hilferty upper 0.1% point of chi-square with 119 degrees of freedom.
    df, z = 119, 3.090232
    crit = df * (1 - 2 / (9 * df) + z * math.sqrt(2 / (9 * df))) ** 3
    assert chi2 < crit


def test_fingerprint_sensitivity():
    fps = {fingerprint(s, V, d) for s in range(20) for V in (8, 9) for d in (4, 5)}
    assert len(fps) == 80


def test_obfuscated_weights_match_dense_oracle(small_model):
    s = gen_secret(16, 6, 4)
    obf = obfuscate_model(small_model, s)
    P_emb, P = T.dense_perm(s.pi_emb), T.dense_perm(s.pi)
    assert np.array_equal(obf.W_emb, P_emb.T @ small_model.W_emb)
    assert np.array_equal(obf.W_cls, P.T @ small_model.W_cls)
    for bp, bo in zip(small_model.blocks, obf.blocks):
        for name in ("W_q", "W_k", "W_v", "W_1", "W_3"):
            assert np.array_equal(getattr(bo, name), P.T @ getattr(bp, name))
        for name in ("W_o", "W_2"):
            assert np.array_equal(getattr(bo, name), getattr(bp, name) @ P)
        for name in ("gamma1", "beta1", "gamma2", "beta2"):
            assert np.array_equal(getattr(bo, name), getattr(bp, name) @ P)
    assert obf.obfuscated and obf.secret_fingerprint == s.fingerprint


@given(st.integers(0, 2**32 - 1), st.booleans(), st.sampled_from(["layernorm", "rmsnorm"]))
def test_block_stack_functionality_preserved(seed, positional, norm):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(9, int(r.integers(2, 9)), 5, 2, 4, norm_kind=norm, use_positional=positional, seed=seed)
    plain = init_model(cfg)
    s = gen_secret(9, cfg.model_dim, seed)
    x = r.standard_normal((3, cfg.model_dim))
    out = forward_embedded(obfuscate_model(plain, s), T.apply_cols(x, s.pi))
    np.testing.assert_allclose(out, forward_embedded(plain, x), rtol=1e-10, atol=1e-12)


def test_deobfuscate_inverts(small_model):
    s = gen_secret(16, 6, 2)
    back = deobfuscate_model(obfuscate_model(small_model, s), s)
    assert not back.obfuscated
    for name, arr in small_model.named_tensors():
        assert np.array_equal(arr, back.get(name))


@given(st.integers(0, 1000), st.integers(0, 1000))
def test_double_obfuscation_composes(s1, s2):
    plain = init_model(ModelConfig(7, 4, 3, 1, 2, seed=1))
    a, b = gen_secret(7, 4, s1), gen_secret(7, 4, s2)
    twice = obfuscate_model(obfuscate_model(plain, a), b, allow_obfuscated=True)
    comp = PermutationSecret(T.compose_perm(a.pi_emb, b.pi_emb), T.compose_perm(a.pi, b.pi), 0, 0)
    once = obfuscate_model(plain, comp)
    for name, arr in once.named_tensors():
        assert np.array_equal(arr, twice.get(name))


def test_identity_secret_is_noop(small_model):
    obf = obfuscate_model(small_model, identity_secret(16, 6))
    for name, arr in small_model.named_tensors():
        assert np.array_equal(arr, obf.get(name))


def test_obfuscate_guards(small_model):
    s = gen_secret(16, 6, 0)
    with pytest.raises(ValueError):
        obfuscate_model(obfuscate_model(small_model, s), s)
    with pytest.raises(T.ShapeError):
        obfuscate_model(small_model, gen_secret(16, 5, 0))


def test_guess_probability_exact():
    for d in range(1, 26):
        exact = Fraction(1, math.factorial(d))
        assert abs(Fraction(guess_probability(d)) / exact - 1) <= Fraction(1, 10**12)
    assert guess_probability(1) == 1.0
    assert log_guess_probability(4096) == pytest.approx(-math.lgamma(4097), rel=1e-15)
    assert guess_probability(4096) == 0.0  # underflows; use the log form
    with pytest.raises(ValueError):
        guess_probability(0)


def test_min_hot_count_values():
    assert min_hot_count(1024) == 103
    assert min_hot_count(65536) == 4096
    assert min_hot_count(2) == 2
    for V in [2, 3, 4, 5, 7, 8, 31, 32, 100, 1000, 4096, 32000, 50257, 65536, 100000, 2**17]:
        assert min_hot_count(V) == min_hot_oracle(V) == math.ceil(V / math.log2(V))
    with pytest.raises(ValueError):
        min_hot_count(1)


def test_gen_otp(rng):
    emb = rng.standard_normal((20, 3))
    pad = gen_otp(emb, 4, 6, 99, session_id=5)
    assert pad.hot.shape == (4, 6) and pad.session_id == 5
    for row, mw in zip(pad.hot, pad.mW_emb):
        assert len(set(row)) == 6 and list(row) == sorted(row) and row.max() < 20
        np.testing.assert_allclose(mw, emb[row].sum(0), rtol=1e-14)
    assert np.array_equal(pad.hot, gen_otp(emb, 4, 6, 99).hot)
    with pytest.raises(ValueError):
        gen_otp(emb, 4, min_hot_count(20) - 1, 0)
    with pytest.raises(ValueError):
        gen_otp(emb, 4, 21, 0)
    with pytest.raises(ValueError):
        gen_otp(emb, 0, 6, 0)


def test_secret_io_roundtrip():
    s = gen_secret(33, 7, 123)
    data = secret_to_bytes(s)
    assert secret_from_bytes(data) == s
    with pytest.raises(FormatError):
        secret_from_bytes(data[:-1])
    with pytest.raises(FormatError):
        secret_from_bytes(b"NOPE" + data[4:])
    bad = bytearray(data)
    bad[20:24] = bad[24:28]  # duplicate an entry of pi_emb
    with pytest.raises(FormatError):
        secret_from_bytes(bytes(bad))


def test_pads_io_roundtrip(rng):
    emb = rng.standard_normal((16, 4))
    pads = gen_pad_pool(emb, 3, 5, 4, seed=1)
    assert [p.session_id for p in pads] == [0, 1, 2, 3]
    back, V, fp = pads_from_bytes(pads_to_bytes(pads, 16, 77))
    assert (V, fp) == (16, 77)
    for a, b in zip(pads, back):
        assert a.session_id == b.session_id and np.array_equal(a.hot, b.hot) and np.array_equal(a.mW_emb, b.mW_emb)
    with pytest.raises(FormatError):
        pads_from_bytes(pads_to_bytes(pads, 16, 77)[:-3])
    with pytest.raises(ValueError):
        pads_to_bytes([], 16, 0)
