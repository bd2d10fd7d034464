"""Analytical forward-pass FLOPs and the share that must run inside a TEE.

Counting policy (the tensor kernels charge the same amounts when a
:func:`distillock.tensor.count_flops` context is active):

==========================  =====================================
operation                   FLOPs
==========================  =====================================
matmul (a×b)·(b×c)          2abc
elementwise op              1 per element (add, sub, mul, SiLU)
softmax, row of width w     5w
LayerNorm/RMSNorm, width w  6w
permutation / shuffle       0
sparse gather-sum           nnz·d (plain lookup: nnz = 1)
pad union                   k + 1 per row
==========================  =====================================
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources

import yaml

from .model import ModelConfig
from .obfuscate import min_hot_count

SCHEMES = ("darknetz", "shadownet", "serdab", "distillock")

POLICY = {
    "mac": 2,
    "elementwise": 1,
    "softmax_per_element": 5,
    "norm_per_element": 6,
    "shuffle": 0,
}


def _softmax(rows: int, width: int) -> int:
    return POLICY["softmax_per_element"] * rows * width


def _norm(rows: int, width: int) -> int:
    return POLICY["norm_per_element"] * rows * width


def _mm(a: int, b: int, c: int) -> int:
    return POLICY["mac"] * a * b * c


def block_flops(cfg: ModelConfig, n: int) -> int:
    """One transformer block on ``n`` positions."""
    d, m = cfg.model_dim, cfg.ffn_dim
    attention = 4 * _mm(n, d, d) + _mm(n, d, n) + _softmax(n, n) + _mm(n, n, d)
    ffn = 2 * _mm(n, d, m) + n * m + n * m + _mm(n, m, d)
    residual_and_norms = 2 * n * d + 2 * _norm(n, d)
    return attention + ffn + residual_and_norms


def block_nonlinear_flops(cfg: ModelConfig, n: int) -> int:
    """Softmax, both norms, SiLU and the gating product of one block."""
    return _softmax(n, n) + 2 * _norm(n, cfg.model_dim) + 2 * n * cfg.ffn_dim


def embedding_flops(cfg: ModelConfig, n: int) -> int:
    lookup = n * cfg.model_dim
    positional = n * cfg.model_dim if cfg.use_positional else 0
    return lookup + positional


def classifier_flops(cfg: ModelConfig, n: int) -> int:
    return _mm(n, cfg.model_dim, cfg.vocab_size)


def sequence_flops(cfg: ModelConfig, n: int) -> int:
    return embedding_flops(cfg, n) + cfg.num_layers * block_flops(cfg, n) + classifier_flops(cfg, n)


def _chunks(seq_len: int, token_count: int) -> list[tuple[int, int]]:
    """``(length, repeats)`` of full sequences plus one trailing partial sequence."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    full, rest = divmod(token_count, seq_len)
    out = [(seq_len, full)] if full else []
    if rest:
        out.append((rest, 1))
    return out


def total_forward_flops(cfg: ModelConfig, seq_len: int, token_count: int | None = None) -> int:
    """FLOPs of the plain forward over ``token_count`` tokens split into ``seq_len`` chunks."""
    token_count = seq_len if token_count is None else token_count
    return sum(reps * sequence_flops(cfg, n) for n, reps in _chunks(seq_len, token_count))


def distillock_session_flops(n: int, k: int, d: int) -> int:
    """Pad union ``n(k+1)`` plus un-masking subtraction ``n·d``; permutations are free."""
    return n * (k + 1) + n * d + POLICY["shuffle"]


def tee_sequence_flops(scheme: str, cfg: ModelConfig, n: int, k: int | None = None) -> int:
    if scheme == "serdab":
        return block_flops(cfg, n)
    if scheme == "darknetz":
        return block_flops(cfg, n) + classifier_flops(cfg, n)
    if scheme == "shadownet":
        return cfg.num_layers * block_nonlinear_flops(cfg, n)
    if scheme == "distillock":
        k = min_hot_count(cfg.vocab_size) if k is None else k
        return distillock_session_flops(n, k, cfg.model_dim)
    raise ValueError(f"unknown scheme {scheme!r}")


def tee_flops(scheme: str, cfg: ModelConfig, seq_len: int, token_count: int | None = None, k: int | None = None) -> int:
    token_count = seq_len if token_count is None else token_count
    return sum(reps * tee_sequence_flops(scheme, cfg, n, k) for n, reps in _chunks(seq_len, token_count))


@dataclass
class ReportRow:
    scheme: str
    tee_flops: int
    percent: float


@dataclass
class FlopsReport:
    name: str
    total: int
    rows: list[ReportRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "scheme", "tee_flops", "total_flops", "percent_of_total"])
        for r in self.rows:
            w.writerow([self.name, r.scheme, r.tee_flops, self.total, f"{r.percent:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{self.name}: total FLOPs {self.total:,}"]
        width = max(len(f"{r.tee_flops:,}") for r in self.rows)
        for r in self.rows:
            lines.append(f"  {r.scheme + '-TEE':<14} {r.tee_flops:>{width},}  {r.percent:8.4f}%")
        return "\n".join(lines)


def report(cfg: ModelConfig, seq_len: int, token_count: int | None = None, name: str = "model", k: int | None = None) -> FlopsReport:
    total = total_forward_flops(cfg, seq_len, token_count)
    rows = []
    for scheme in SCHEMES:
        t = tee_flops(scheme, cfg, seq_len, token_count, k)
        rows.append(ReportRow(scheme, t, 100.0 * t / total))
    return FlopsReport(name, total, rows)


def reference_configs() -> dict[str, dict]:
    """Public architecture sizes of the two reference models, plus workload defaults."""
    text = resources.files("distillock").joinpath("data/reference_configs.yaml").read_text()
    return yaml.safe_load(text)


def reference_config(name: str) -> tuple[ModelConfig, int]:
    """``(config, seq_len)`` for an entry of :func:`reference_configs`."""
    entry = dict(reference_configs()[name])
    seq_len = int(entry.pop("seq_len"))
    return ModelConfig.from_dict(entry), seq_len


# Reference numbers for full-size models; workload unknown, so never asserted.
REFERENCE_TABLE = {
    "llama3.2-3b": {
        "total": 11_913_901_394_688,
        "darknetz": 427_016_202_048,
        "shadownet": 1_469_885_448_192,
        "serdab": 425_440_192_320,
        "distillock": 52_539_949_056,
    },
    "qwen2.5-1.5b": {
        "total": 5_613_429_499_648,
        "darknetz": 199_157_061_696,
        "shadownet": 920_602_437_942,
        "serdab": 260_459_698_240,
        "distillock": 62_236_131_328,
    },
}

__all__ = [
    "REFERENCE_TABLE",
    "reference_config",
    "reference_configs",
    "SCHEMES",
    "report",
    "tee_flops",
    "total_forward_flops",
]
