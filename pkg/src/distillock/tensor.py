"""Deterministic dense kernels shared by every other module.

Matrices are plain ``float64`` numpy arrays. Kernels accept leading batch
dimensions where that is natural (``matmul``, row-wise normalisations), so the
same code path serves single sequences and training batches.

A :class:`FlopCounter` can be activated with :func:`count_flops`; while active,
each kernel reports its cost under the fixed policy in :mod:`distillock.flops`.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from typing import Iterator

import numpy as np

DEFAULT_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class FlopCounter:
    """Accumulates FLOPs per category while a counting context is active."""

    def __init__(self) -> None:
        self.by_kind: Counter[str] = Counter()

    def add(self, kind: str, n: int) -> None:
        self.by_kind[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


_active_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "distillock_flop_counter", default=None
)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def record(kind: str, n: int) -> None:
    """Charge ``n`` FLOPs to the active counter, if any."""
    counter = _active_counter.get()
    if counter is not None:
        counter.add(kind, n)


def _leading(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, ascending inner summation order.

    Every output element is accumulated as ``((0 + a0*b0) + a1*b1) + ...`` so
    results are reproducible bit-for-bit and independent of BLAS threading.
    Leading batch dimensions broadcast as in ``np.matmul``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    acc = np.zeros(out_shape)
    for i in range(a.shape[-1]):
        acc += a[..., :, i : i + 1] * b[..., i : i + 1, :]
    batch = _leading(out_shape)
    record("matmul", 2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return acc


def check_perm(perm, size: int | None = None) -> np.ndarray:
    """Validate an index-array permutation and return it as ``int64``."""
    p = np.asarray(perm)
    if p.ndim != 1 or not np.issubdtype(p.dtype, np.integer):
        raise ValueError("permutation must be a 1-D integer array")
    if size is not None and p.shape[0] != size:
        raise ShapeError(f"permutation of length {p.shape[0]} applied to axis of size {size}")
    if not np.array_equal(np.sort(p), np.arange(p.shape[0])):
        raise ValueError("index array is not a permutation")
    return p.astype(np.int64, copy=False)


def invert_perm(perm) -> np.ndarray:
    p = check_perm(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0])
    return inv


def compose_perm(first, second) -> np.ndarray:
    """Index array for applying ``first`` then ``second`` (``π·ρ`` as matrices)."""
    return check_perm(first)[check_perm(second)]


def dense_perm(perm) -> np.ndarray:
    """Materialise the 0/1 matrix with ones at ``(perm[j], j)``. Test oracles only."""
    p = check_perm(perm)
    out = np.zeros((p.shape[0], p.shape[0]))
    out[p, np.arange(p.shape[0])] = 1.0
    return out


def apply_cols(x: np.ndarray, perm) -> np.ndarray:
    """``out[..., j] = x[..., perm[j]]``, i.e. right-multiplication by π."""
    x = np.asarray(x)
    p = check_perm(perm, x.shape[-1])
    return x[..., p]


def apply_rows(x: np.ndarray, perm) -> np.ndarray:
    """``out[j] = x[perm[j]]``, i.e. left-multiplication by πᵀ."""
    x = np.asarray(x)
    p = check_perm(perm, x.shape[0])
    return x[p]


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = np.asarray(x, dtype=np.float64)
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    record("softmax", 5 * x.size)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    record("silu", x.size)
    return x * sigmoid(x)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.add(a, b, dtype=np.float64)
    record("add", out.size)
    return out


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.subtract(a, b, dtype=np.float64)
    record("sub", out.size)
    return out


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.multiply(a, b, dtype=np.float64)
    record("mul", out.size)
    return out


def _check_param(vec, x: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (x.shape[-1],):
        raise ShapeError(f"{name} has shape {v.shape}, expected ({x.shape[-1]},)")
    return v


def layernorm(x: np.ndarray, gamma, beta, eps: float = DEFAULT_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gamma = _check_param(gamma, x, "gamma")
    beta = _check_param(beta, x, "beta")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    record("norm", 6 * x.size)
    return gamma * ((x - mu) / np.sqrt(var + eps)) + beta


def rmsnorm(x: np.ndarray, gamma, eps: float = DEFAULT_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gamma = _check_param(gamma, x, "gamma")
    ms = (x * x).mean(axis=-1, keepdims=True)
    record("norm", 6 * x.size)
    return gamma * (x / np.sqrt(ms + eps))


def gather_sum(table: np.ndarray, indices, values) -> np.ndarray:
    """``Σ values[i] * table[indices[i]]`` accumulated in the given index order."""
    table = np.asarray(table, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    val = np.asarray(values, dtype=np.float64)
    if idx.shape != val.shape or idx.ndim != 1:
        raise ShapeError("indices and values must be matching 1-D arrays")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")
    acc = np.zeros(table.shape[1])
    for c, w in zip(idx, val):
        acc += w * table[c]
    record("gather", idx.size * table.shape[1])
    return acc
