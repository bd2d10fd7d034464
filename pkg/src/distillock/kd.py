"""Vanilla knowledge distillation and the toy majority-region task."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import PlainModel, batches, last_logits, loss_and_grads, make_optimizer

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- toy task


def region_of(tokens: np.ndarray, vocab_size: int, num_regions: int) -> np.ndarray:
    """Vocabulary is split into ``num_regions`` contiguous, near-equal ranges."""
    return (np.asarray(tokens) * num_regions) // vocab_size


def majority_label(seq, vocab_size: int, num_regions: int) -> int:
    """Region holding the most tokens of ``seq``; ties go to the lowest region."""
    counts = np.bincount(region_of(seq, vocab_size, num_regions), minlength=num_regions)
    return int(np.argmax(counts))


@dataclass
class ToyDataset:
    tokens: np.ndarray  # (N, seq_len)
    labels: np.ndarray  # (N,) region index
    vocab_size: int
    num_regions: int
    label_offset: int = 0

    @property
    def label_tokens(self) -> np.ndarray:
        """Token ids whose logits are read as class scores."""
        return np.arange(self.label_offset, self.label_offset + self.num_regions)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(self.tokens[idx], self.labels[idx], self.vocab_size, self.num_regions, self.label_offset)


def make_toy_dataset(
    n_samples: int,
    vocab_size: int = 32,
    seq_len: int = 10,
    num_regions: int = 4,
    seed: int = 0,
    balanced: bool = True,
    label_offset: int = 0,
) -> ToyDataset:
    """Uniform random token sequences labelled by :func:`majority_label`.

    With ``balanced`` the target class is drawn uniformly first and sequences
    are rejection-sampled until their label matches, so chance accuracy is
    exactly ``1/num_regions``. The labelling rule itself is unchanged.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 2 <= num_regions <= vocab_size:
        raise ValueError("need 2 <= num_regions <= vocab_size")
    if label_offset + num_regions > vocab_size:
        raise ValueError("label tokens fall outside the vocabulary")
    rng = np.random.default_rng(seed)
    tokens = np.empty((n_samples, seq_len), dtype=np.int64)
    labels = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        target = int(rng.integers(num_regions)) if balanced else None
        while True:
            seq = rng.integers(0, vocab_size, size=seq_len)
            lab = majority_label(seq, vocab_size, num_regions)
            if target is None or lab == target:
                break
        tokens[i], labels[i] = seq, lab
    return ToyDataset(tokens, labels, vocab_size, num_regions, label_offset)


def eval_accuracy(model: PlainModel, data: ToyDataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for start in range(0, len(data), batch_size):
        logits = last_logits(model, data.tokens[start : start + batch_size])
        pred = np.argmax(logits[:, data.label_tokens], axis=1)
        correct += int((pred == data.labels[start : start + batch_size]).sum())
    return correct / len(data)


def accuracy_from_logits(logits: np.ndarray, data: ToyDataset) -> float:
    """Accuracy of precomputed final-position logits ``(N, V)``."""
    return float((np.argmax(logits[:, data.label_tokens], axis=1) == data.labels).mean())


# --------------------------------------------------------------------------- loss


@dataclass
class KDHyper:
    alpha: float = 0.0
    beta: float = 1.0
    tau: float = 2.0
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")

    @classmethod
    def from_ratio(cls, ratio: float, **kw) -> "KDHyper":
        """KD ratio ``r`` weights the distillation term: ``(alpha, beta) = (1 - r, r)``."""
        if not 0.0 <= ratio <= 1.0:
            raise ValueError("KD ratio must lie in [0, 1]")
        return cls(alpha=1.0 - ratio, beta=ratio, **kw)


def kd_loss(student_logits, teacher_logits, label: int, h: KDHyper) -> tuple[float, np.ndarray]:
    """``α·CE(label, softmax(q_S)) + β·KL(softmax(q_T/τ) ‖ softmax(q_S/τ))`` and its gradient in q_S."""
    qs = np.asarray(student_logits, dtype=np.float64)
    qt = np.asarray(teacher_logits, dtype=np.float64)
    if not (np.isfinite(qs).all() and np.isfinite(qt).all()):
        raise ValueError("non-finite logits")
    if qs.shape != qt.shape or qs.ndim != 1:
        raise ValueError("student and teacher logits must be matching vectors")
    logp = T.log_softmax_rows(qs)
    ce = -logp[label]
    grad = h.alpha * np.exp(logp)
    grad[label] -= h.alpha
    loss = h.alpha * ce
    if h.beta:
        log_ps = T.log_softmax_rows(qs, h.tau)
        log_pt = T.log_softmax_rows(qt, h.tau)
        pt = np.exp(log_pt)
        kl = float(np.sum(pt * (log_pt - log_ps)))
        loss += h.beta * kl
        grad += h.beta * (np.exp(log_ps) - pt) / h.tau
    return float(loss), grad


def kd_batch_loss(student_logits: np.ndarray, teacher_logits: np.ndarray | None, labels, h: KDHyper):
    """Mean :func:`kd_loss` over a batch of row vectors."""
    B = student_logits.shape[0]
    total = 0.0
    grad = np.empty_like(student_logits)
    for i in range(B):
        qt = teacher_logits[i] if teacher_logits is not None else student_logits[i]
        loss, g = kd_loss(student_logits[i], qt, int(labels[i]), h)
        total += loss
        grad[i] = g
    return total / B, grad / B


# --------------------------------------------------------------------------- teachers


class TeacherOracle:
    """Callable returning final-position teacher logits ``(B, V)``, cached per sequence."""

    def __init__(self, mode: str, fn: Callable[[np.ndarray], np.ndarray]):
        self.mode = mode
        self._fn = fn
        self._cache: dict[bytes, np.ndarray] = {}
        self.queries = 0

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
        keys = [row.tobytes() for row in batch]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            out = self._fn(batch[missing])
            self.queries += len(missing)
            for i, row in zip(missing, out):
                self._cache[keys[i]] = row
        return np.stack([self._cache[k] for k in keys])


def plain_teacher(model: PlainModel) -> TeacherOracle:
    return TeacherOracle("plain", lambda b: last_logits(model, b))


def authorized_teacher(pipeline) -> TeacherOracle:
    """Teacher queried through an enclave/worker pipeline (see :mod:`distillock.pipeline`)."""
    return TeacherOracle("authorized", pipeline.last_logits)


def unauthorized_teacher(obf: PlainModel) -> TeacherOracle:
    from .worker import unauthorized_forward

    return TeacherOracle("unauthorized", lambda b: np.stack([unauthorized_forward(obf, s).data[-1] for s in b]))


# --------------------------------------------------------------------------- distillation


@dataclass
class EpochMetrics:
    epoch: int
    mode: str
    train_loss: float
    eval_acc: float


@dataclass
class DistillResult:
    student: PlainModel
    metrics: list[EpochMetrics] = field(default_factory=list)
    initial_acc: float = float("nan")

    @property
    def final_acc(self) -> float:
        return self.metrics[-1].eval_acc if self.metrics else self.initial_acc


def distill(
    student: PlainModel,
    teacher: TeacherOracle | None,
    train: ToyDataset,
    test: ToyDataset,
    h: KDHyper,
    readout: str = "labels",
) -> DistillResult:
    """Train ``student`` with :func:`kd_loss` on final-position logits.

    ``readout="labels"`` distils over the label-token slice of the vocabulary;
    ``"full"`` uses all ``V`` logits. With ``beta == 0`` the teacher is never queried.
    """
    if h.beta and teacher is None:
        raise ValueError("a teacher oracle is required when beta > 0")
    if student.config.vocab_size != train.vocab_size:
        raise ValueError("student vocabulary does not match the data")
    if readout not in ("labels", "full"):
        raise ValueError(f"unknown readout {readout!r}")
    mode = teacher.mode if (teacher is not None and h.beta) else "ce_only"
    student = student.copy()
    opt = make_optimizer(student, "adam", h.lr)
    rng = np.random.default_rng(h.seed)
    cols = train.label_tokens if readout == "labels" else np.arange(train.vocab_size)
    label_pos = train.labels if readout == "labels" else train.label_tokens[train.labels]
    result = DistillResult(student, initial_acc=eval_accuracy(student, test))

    for epoch in range(1, h.epochs + 1):
        total, seen = 0.0, 0
        acc_grads: dict[str, np.ndarray] | None = None
        pending = 0
        for idx in batches(len(train), h.batch_size, rng):
            tl = teacher(train.tokens[idx])[:, cols] if h.beta else None

            def loss_fn(logits, tl=tl, idx=idx):
                loss, gsub = kd_batch_loss(logits[:, cols], tl, label_pos[idx], h)
                g = np.zeros_like(logits)
                g[:, cols] = gsub
                return loss, g

            loss, grads = loss_and_grads(student, train.tokens[idx], loss_fn)
            total += loss * len(idx)
            seen += len(idx)
            if acc_grads is None:
                acc_grads = grads
            else:
                for k in acc_grads:
                    acc_grads[k] += grads[k]
            pending += 1
            if pending == h.grad_accum:
                opt.step({k: v / pending for k, v in acc_grads.items()})
                acc_grads, pending = None, 0
        if pending:
            opt.step({k: v / pending for k, v in acc_grads.items()})
        m = EpochMetrics(epoch, mode, total / seen, eval_accuracy(student, test))
        log.debug("epoch %d %s loss=%.4f acc=%.4f", epoch, mode, m.train_loss, m.eval_acc)
        result.metrics.append(m)
    return result


def logits_label_correlation(logits: np.ndarray, data: ToyDataset) -> float:
    """Pearson correlation between the score given to the true label and label-ness.

    Each sample contributes R pairs ``(logit of label token r, 1[r == label])``
    after per-sample centring; 0 means the logits carry no label signal.
    """
    sub = logits[:, data.label_tokens]
    sub = sub - sub.mean(axis=1, keepdims=True)
    target = np.zeros_like(sub)
    target[np.arange(len(data)), data.labels] = 1.0
    target -= target.mean(axis=1, keepdims=True)
    a, b = sub.reshape(-1), target.reshape(-1)
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


__all__ = [
    "DistillResult",
    "EpochMetrics",
    "KDHyper",
    "TeacherOracle",
    "ToyDataset",
    "accuracy_from_logits",
    "authorized_teacher",
    "distill",
    "eval_accuracy",
    "kd_loss",
    "make_toy_dataset",
    "majority_label",
    "plain_teacher",
    "unauthorized_teacher",
]
