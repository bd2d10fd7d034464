"""Permutation secrets, weight obfuscation, and sparse k-hot one-time pads."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import BLOCK_TENSORS, FormatError, ObfuscatedModel, PlainModel

SECRET_MAGIC = b"DLSK"
SECRET_VERSION = 1
PADS_MAGIC = b"DLPD"
PADS_VERSION = 1

_COL_PERMUTED = {"W_o", "W_2", "gamma1", "beta1", "gamma2", "beta2", "pos_emb"}
_ROW_PERMUTED = {"W_q", "W_k", "W_v", "W_1", "W_3", "W_cls"}


def fingerprint(seed: int, vocab_size: int, model_dim: int) -> int:
    h = hashlib.blake2b(struct.pack("<QII", seed, vocab_size, model_dim), digest_size=8, person=b"distillock")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class PermutationSecret:
    pi_emb: np.ndarray
    pi: np.ndarray
    seed: int
    fingerprint: int
    pi_emb_inv: np.ndarray = field(repr=False, compare=False, default=None)
    pi_inv: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pi_emb", T.check_perm(self.pi_emb))
        object.__setattr__(self, "pi", T.check_perm(self.pi))
        object.__setattr__(self, "pi_emb_inv", T.invert_perm(self.pi_emb))
        object.__setattr__(self, "pi_inv", T.invert_perm(self.pi))

    @property
    def vocab_size(self) -> int:
        return self.pi_emb.shape[0]

    @property
    def model_dim(self) -> int:
        return self.pi.shape[0]

    def inverse(self) -> "PermutationSecret":
        return PermutationSecret(self.pi_emb_inv, self.pi_inv, self.seed, self.fingerprint)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PermutationSecret)
            and np.array_equal(self.pi_emb, other.pi_emb)
            and np.array_equal(self.pi, other.pi)
            and self.seed == other.seed
            and self.fingerprint == other.fingerprint
        )


def gen_secret(vocab_size: int, model_dim: int, seed: int) -> PermutationSecret:
    if vocab_size < 2 or model_dim < 2:
        raise ValueError(f"degenerate sizes V={vocab_size}, d={model_dim}")
    emb_seq, dim_seq = np.random.SeedSequence(seed).spawn(2)
    pi_emb = np.random.default_rng(emb_seq).permutation(vocab_size)
    pi = np.random.default_rng(dim_seq).permutation(model_dim)
    return PermutationSecret(pi_emb, pi, seed, fingerprint(seed, vocab_size, model_dim))


def identity_secret(vocab_size: int, model_dim: int, seed: int = 0) -> PermutationSecret:
    return PermutationSecret(np.arange(vocab_size), np.arange(model_dim), seed, fingerprint(seed, vocab_size, model_dim))


def log_guess_probability(d: int) -> float:
    """Natural log of ``1/d!``, the chance of guessing a d×d permutation."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return -math.lgamma(d + 1)


def guess_probability(d: int) -> float:
    return math.exp(log_guess_probability(d))


def min_hot_count(vocab_size: int) -> int:
    """Smallest admissible pad weight ``ceil(V / log2 V)``."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return math.ceil(vocab_size / math.log2(vocab_size))


def _transform(model: PlainModel, pi_emb: np.ndarray, pi: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in model.named_tensors():
        attr = name.rsplit(".", 1)[-1]
        if attr == "W_emb":
            out[name] = T.apply_rows(arr, pi_emb)
        elif attr in _ROW_PERMUTED:
            out[name] = T.apply_rows(arr, pi)
        elif attr in _COL_PERMUTED:
            out[name] = T.apply_cols(arr, pi)
        else:  # pragma: no cover - every tensor is classified above
            raise AssertionError(name)
    return out


def _check_dims(model: PlainModel, secret: PermutationSecret) -> None:
    c = model.config
    if secret.vocab_size != c.vocab_size or secret.model_dim != c.model_dim:
        raise T.ShapeError(
            f"secret is for V={secret.vocab_size}, d={secret.model_dim}; model has V={c.vocab_size}, d={c.model_dim}"
        )


def _rebuild(model: PlainModel, tensors: dict[str, np.ndarray], cls, **extra):
    skeleton = model.copy()
    for name, arr in tensors.items():
        skeleton.set(name, arr)
    return cls(config=model.config, W_emb=skeleton.W_emb, blocks=skeleton.blocks,
               W_cls=skeleton.W_cls, pos_emb=skeleton.pos_emb, **extra)


def obfuscate_model(plain: PlainModel, secret: PermutationSecret, *, allow_obfuscated: bool = False) -> ObfuscatedModel:
    """Apply the secret: row-permute W_emb by π_emb, conjugate every block by π.

    ``allow_obfuscated`` lifts the double-obfuscation guard (composition tests only).
    """
    if plain.obfuscated and not allow_obfuscated:
        raise ValueError("model is already obfuscated")
    _check_dims(plain, secret)
    return _rebuild(plain, _transform(plain, secret.pi_emb, secret.pi), ObfuscatedModel,
                    secret_fingerprint=secret.fingerprint)


def deobfuscate_model(obf: PlainModel, secret: PermutationSecret) -> PlainModel:
    _check_dims(obf, secret)
    return _rebuild(obf, _transform(obf, secret.pi_emb_inv, secret.pi_inv), PlainModel)


# --------------------------------------------------------------------------- one-time pads


@dataclass
class OtpPad:
    session_id: int
    k: int
    hot: np.ndarray  # (n, k) sorted hot indices per row
    mW_emb: np.ndarray  # (n, d), from the plain embedding

    @property
    def seq_len(self) -> int:
        return self.hot.shape[0]

    def truncated(self, n: int) -> "OtpPad":
        if n > self.seq_len:
            raise ValueError(f"pad covers {self.seq_len} positions, {n} requested")
        return OtpPad(self.session_id, self.k, self.hot[:n], self.mW_emb[:n])


def gen_otp(plain_emb: np.ndarray, seq_len: int, k: int, session_seed, session_id: int = 0) -> OtpPad:
    """Fresh k-hot pad for ``seq_len`` positions with its product ``m·W_emb``."""
    V = plain_emb.shape[0]
    if not min_hot_count(V) <= k <= V:
        raise ValueError(f"k={k} outside [{min_hot_count(V)}, {V}]")
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    rng = np.random.default_rng(session_seed)
    hot = np.stack([np.sort(rng.choice(V, size=k, replace=False)) for _ in range(seq_len)])
    mW = np.stack([T.gather_sum(plain_emb, row, np.ones(k)) for row in hot])
    return OtpPad(session_id, k, hot.astype(np.int64), mW)


def _pad_seed(pool_seed: int, session_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([pool_seed & (2**64 - 1), session_id & (2**64 - 1)])


def gen_pad_pool(plain_emb: np.ndarray, seq_len: int, k: int, count: int, seed: int) -> list[OtpPad]:
    """Offline batch of pads with distinct session ids ``0..count-1``."""
    return [gen_otp(plain_emb, seq_len, k, _pad_seed(seed, i), session_id=i) for i in range(count)]


# --------------------------------------------------------------------------- file formats

_SECRET_HDR = struct.Struct("<4sHIIQ")


def secret_to_bytes(secret: PermutationSecret) -> bytes:
    return (
        _SECRET_HDR.pack(SECRET_MAGIC, SECRET_VERSION, secret.vocab_size, secret.model_dim, secret.seed)
        + secret.pi_emb.astype("<u4").tobytes()
        + secret.pi.astype("<u4").tobytes()
        + struct.pack("<Q", secret.fingerprint)
    )


def secret_from_bytes(data: bytes) -> PermutationSecret:
    if len(data) < _SECRET_HDR.size:
        raise FormatError("secret file truncated")
    magic, version, V, d, seed = _SECRET_HDR.unpack_from(data, 0)
    if magic != SECRET_MAGIC:
        raise FormatError(f"bad secret magic {magic!r}")
    if version != SECRET_VERSION:
        raise FormatError(f"unsupported secret version {version}")
    expected = _SECRET_HDR.size + 4 * (V + d) + 8
    if len(data) != expected:
        raise FormatError(f"secret file is {len(data)} bytes, expected {expected}")
    off = _SECRET_HDR.size
    pi_emb = np.frombuffer(data, "<u4", V, off).astype(np.int64)
    pi = np.frombuffer(data, "<u4", d, off + 4 * V).astype(np.int64)
    (fp,) = struct.unpack_from("<Q", data, off + 4 * (V + d))
    try:
        return PermutationSecret(pi_emb, pi, seed, fp)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


_PADS_HDR = struct.Struct("<4sHIIIIIQ")


def pads_to_bytes(pads: list[OtpPad], vocab_size: int, secret_fp: int) -> bytes:
    if not pads:
        raise ValueError("empty pad pool")
    n, k = pads[0].hot.shape
    d = pads[0].mW_emb.shape[1]
    parts = [_PADS_HDR.pack(PADS_MAGIC, PADS_VERSION, vocab_size, d, k, n, len(pads), secret_fp)]
    for p in pads:
        if p.hot.shape != (n, k) or p.mW_emb.shape != (n, d):
            raise ValueError("pads in a pool must share shape")
        parts.append(struct.pack("<Q", p.session_id))
        parts.append(p.hot.astype("<u4").tobytes())
        parts.append(np.ascontiguousarray(p.mW_emb, dtype="<f8").tobytes())
    return b"".join(parts)


def pads_from_bytes(data: bytes) -> tuple[list[OtpPad], int, int]:
    """Returns ``(pads, vocab_size, secret_fingerprint)``."""
    if len(data) < _PADS_HDR.size:
        raise FormatError("pad file truncated")
    magic, version, V, d, k, n, count, fp = _PADS_HDR.unpack_from(data, 0)
    if magic != PADS_MAGIC:
        raise FormatError(f"bad pad magic {magic!r}")
    if version != PADS_VERSION:
        raise FormatError(f"unsupported pad version {version}")
    per = 8 + 4 * n * k + 8 * n * d
    if len(data) != _PADS_HDR.size + per * count:
        raise FormatError("pad file length does not match header")
    pads = []
    off = _PADS_HDR.size
    for _ in range(count):
        (sid,) = struct.unpack_from("<Q", data, off)
        hot = np.frombuffer(data, "<u4", n * k, off + 8).astype(np.int64).reshape(n, k)
        mW = np.frombuffer(data, "<f8", n * d, off + 8 + 4 * n * k).reshape(n, d).copy()
        pads.append(OtpPad(sid, k, hot, mW))
        off += per
    return pads, V, fp


def save_secret(secret: PermutationSecret, path) -> None:
    with open(path, "wb") as f:
        f.write(secret_to_bytes(secret))


def load_secret(path) -> PermutationSecret:
    with open(path, "rb") as f:
        return secret_from_bytes(f.read())


def save_pads(pads: list[OtpPad], vocab_size: int, secret_fp: int, path) -> None:
    with open(path, "wb") as f:
        f.write(pads_to_bytes(pads, vocab_size, secret_fp))


def load_pads(path) -> tuple[list[OtpPad], int, int]:
    with open(path, "rb") as f:
        return pads_from_bytes(f.read())
