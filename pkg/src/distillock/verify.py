"""Self-check suite behind ``distillock verify``.

Each check compares a fast code path against an independent dense or exact
reference on random draws and returns a :class:`CheckResult`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import flops
from . import tensor as T
from .enclave import AuthSession, Enclave, SeededPads, authorize_input
from .model import ModelConfig, forward, init_model
from .obfuscate import deobfuscate_model, gen_otp, gen_secret, guess_probability, min_hot_count, obfuscate_model
from .pipeline import LoopbackPipeline
from .protocol import (
    AuthorizedInput,
    EmbedReply,
    EncryptedInput,
    Envelope,
    ErrorMsg,
    Hello,
    Logits,
    TokenIds,
    decode,
    encode,
)
from .worker import Worker, embed_sparse


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-abs difference scaled by the reference's max-abs (floored at 1)."""
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


# --------------------------------------------------------------------------- random draws


def random_config(rng: np.random.Generator, max_seq_len: int = 8) -> ModelConfig:
    return ModelConfig(
        vocab_size=int(rng.integers(8, 65)),
        model_dim=int(rng.integers(4, 17)),
        ffn_dim=int(rng.integers(4, 33)),
        num_layers=int(rng.integers(1, 4)),
        max_seq_len=max_seq_len,
        norm_kind=str(rng.choice(["layernorm", "rmsnorm"])),
        use_positional=bool(rng.integers(2)),
        seed=int(rng.integers(2**32)),
    )


def random_message(rng: np.random.Generator, kind: type, vocab_size: int = 64):
    n = int(rng.integers(0, 6))
    if kind is TokenIds:
        return TokenIds(rng.integers(0, vocab_size, size=n))
    if kind is EncryptedInput:
        idx, val = [], []
        for _ in range(n):
            k = int(rng.integers(0, vocab_size + 1))
            idx.append(np.sort(rng.choice(vocab_size, size=k, replace=False)))
            val.append(rng.standard_normal(k) * 10.0 ** rng.integers(-5, 5, size=k))
        return EncryptedInput(idx, val)
    if kind in (EmbedReply, AuthorizedInput, Logits):
        return kind(rng.standard_normal((n, int(rng.integers(0, 7)))) * 1e3)
    if kind is ErrorMsg:
        alphabet = "abcxyz é€😀 \n"
        return ErrorMsg(int(rng.integers(0, 2**16)), "".join(rng.choice(list(alphabet), size=n)))
    if kind is Hello:
        return Hello(int(rng.integers(0, 2**63)) * 2 + int(rng.integers(2)))
    raise TypeError(kind)


MESSAGE_TYPES = (TokenIds, EncryptedInput, EmbedReply, AuthorizedInput, Logits, ErrorMsg, Hello)


# --------------------------------------------------------------------------- checks


def check_central_equivalence(draws: int = 50, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Authorised pipeline logits equal plain forward logits."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        cfg = random_config(rng)
        plain = init_model(cfg)
        secret = gen_secret(cfg.vocab_size, cfg.model_dim, int(rng.integers(2**32)))
        pipe = LoopbackPipeline(
            Enclave(secret, SeededPads(plain.W_emb, int(rng.integers(2**32)))), Worker(obfuscate_model(plain, secret))
        )
        ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, cfg.max_seq_len + 1)))
        worst = max(worst, rel_err(pipe.infer(ids), forward(plain, ids)))
    return CheckResult("authorized logits == plain logits", worst <= tol, f"{draws} draws, worst rel err {worst:.2e}")


def check_norm_equivariance(trials: int = 200, seed: int = 1, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 33))
        x = rng.standard_normal((int(rng.integers(1, 6)), d)) * 3
        g, b = rng.standard_normal(d), rng.standard_normal(d)
        p = rng.permutation(d)
        ln = T.layernorm(T.apply_cols(x, p), T.apply_cols(g, p), T.apply_cols(b, p))
        rms = T.rmsnorm(T.apply_cols(x, p), T.apply_cols(g, p))
        worst = max(
            worst,
            float(np.max(np.abs(ln - T.apply_cols(T.layernorm(x, g, b), p)))),
            float(np.max(np.abs(rms - T.apply_cols(T.rmsnorm(x, g), p)))),
        )
    return CheckResult("norm permutation equivariance", worst <= tol, f"{trials} trials, worst abs err {worst:.2e}")


def check_obfuscation_roundtrip(draws: int = 20, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(draws):
        cfg = random_config(rng)
        plain = init_model(cfg)
        secret = gen_secret(cfg.vocab_size, cfg.model_dim, int(rng.integers(2**32)))
        back = deobfuscate_model(obfuscate_model(plain, secret), secret)
        ok &= all(np.array_equal(a, back.get(n)) for n, a in plain.named_tensors())
    return CheckResult("deobfuscate(obfuscate(W)) == W", ok, f"{draws} draws, bitwise")


def check_codec_roundtrip(per_type: int = 200, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for kind in MESSAGE_TYPES:
        for _ in range(per_type):
            env = Envelope(int(rng.integers(0, 2**64, dtype=np.uint64)), random_message(rng, kind))
            frame = encode(env)
            back = decode(frame)
            bad += not (back.session_id == env.session_id and back.body == env.body and encode(back) == frame)
    n = per_type * len(MESSAGE_TYPES)
    return CheckResult("wire codec round-trip", bad == 0, f"{n} messages, {bad} mismatches")


def check_sparse_paths(cases: int = 200, seed: int = 4, tol: float = 1e-9) -> CheckResult:
    """Sparse gather and index remap against dense matrix products."""
    rng = np.random.default_rng(seed)
    worst, remap_ok = 0.0, True
    for _ in range(cases):
        cfg = random_config(rng)
        plain = init_model(cfg)
        secret = gen_secret(cfg.vocab_size, cfg.model_dim, int(rng.integers(2**32)))
        obf = obfuscate_model(plain, secret)
        n = int(rng.integers(1, cfg.max_seq_len + 1))
        k = int(rng.integers(min_hot_count(cfg.vocab_size), cfg.vocab_size + 1))
        pad = gen_otp(plain.W_emb, n, k, int(rng.integers(2**32)))
        dense_m = np.zeros((n, cfg.vocab_size))
        for r, hot in enumerate(pad.hot):
            dense_m[r, hot] = 1.0
        worst = max(worst, rel_err(pad.mW_emb, dense_m @ plain.W_emb))

        ids = rng.integers(0, cfg.vocab_size, size=n)
        enc = authorize_input(AuthSession(0, pad, secret), ids)
        h = np.zeros((n, cfg.vocab_size))
        h[np.arange(n), ids] = 1.0
        remap_ok &= np.array_equal(enc.densify(cfg.vocab_size), (h + dense_m) @ T.dense_perm(secret.pi_emb))
        worst = max(worst, rel_err(embed_sparse(obf, enc).data, enc.densify(cfg.vocab_size) @ obf.W_emb))
    ok = worst <= tol and remap_ok
    return CheckResult(
        "sparse gather / remap == dense oracle", ok, f"{cases} cases, worst rel err {worst:.2e}, remap bitwise {remap_ok}"
    )


def check_security_bounds() -> CheckResult:
    worst = max(abs(guess_probability(d) * math.factorial(d) - 1.0) for d in range(1, 26))
    hot_ok = True
    for V in (2, 3, 16, 100, 1024, 32000, 65536, 2**17):
        k = min_hot_count(V)
        # ceil(V / log2 V) is the least k with V**k >= 2**V.
        hot_ok &= V**k >= 2**V and (k == 1 or V ** (k - 1) < 2**V)
    return CheckResult(
        "guessing bound and minimum pad weight",
        worst <= 1e-12 and hot_ok,
        f"max |p·d! − 1| = {worst:.1e} for d ≤ 25, min_hot_count exact {hot_ok}",
    )


def check_flop_counter(draws: int = 20, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(draws):
        cfg = random_config(rng).replace(model_dim=int(rng.integers(2, 9)))
        n = int(rng.integers(1, cfg.max_seq_len + 1))
        with T.count_flops() as c:
            forward(init_model(cfg), rng.integers(0, cfg.vocab_size, size=n))
        mismatches += c.total != flops.total_forward_flops(cfg, n)
    return CheckResult("analytical FLOPs == instrumented count", mismatches == 0, f"{draws} models with d ≤ 8")


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_central_equivalence,
    check_norm_equivariance,
    check_obfuscation_roundtrip,
    check_codec_roundtrip,
    check_sparse_paths,
    check_security_bounds,
    check_flop_counter,
)


def run_all(checks=CHECKS) -> list[CheckResult]:
    out = []
    for check in checks:
        t = time.perf_counter()
        res = check()
        res.seconds = time.perf_counter() - t
        out.append(res)
    return out
