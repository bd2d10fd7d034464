import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distillock.kd import (
    KDHyper,
    TeacherOracle,
    accuracy_from_logits,
    distill,
    eval_accuracy,
    kd_loss,
    logits_label_correlation,
    majority_label,
    make_toy_dataset,
    plain_teacher,
    region_of,
)
from distillock.model import ModelConfig, init_model, last_logits

mpmath.mp.dps = 50


def kd_loss_oracle(qs, qt, label, alpha, beta, tau):
    qs = [mpmath.mpf(float(v)) for v in qs]
    qt = [mpmath.mpf(float(v)) for v in qt]

    def softmax(q, t):
        e = [mpmath.exp(v / t) for v in q]
        z = mpmath.fsum(e)
        return [v / z for v in e]

    ce = -mpmath.log(softmax(qs, 1)[label])
    pt, ps = softmax(qt, tau), softmax(qs, tau)
    kl = mpmath.fsum(a * (mpmath.log(a) - mpmath.log(b)) for a, b in zip(pt, ps))
    return alpha * ce + beta * kl


@given(st.integers(0, 2**32 - 1))
def test_kd_loss_matches_high_precision(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 10))
    qs, qt = r.standard_normal(n) * 3, r.standard_normal(n) * 3
    label = int(r.integers(n))
    alpha, beta, tau = float(r.uniform()), float(r.uniform()), float(r.uniform(0.5, 4))
    loss, _ = kd_loss(qs, qt, label, KDHyper(alpha=alpha, beta=beta + 1e-3, tau=tau))
    ref = kd_loss_oracle(qs, qt, label, alpha, beta + 1e-3, tau)
    assert abs(loss - float(ref)) <= 1e-12 * max(1.0, abs(float(ref)))


def test_kd_loss_gradient_finite_difference():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(r.integers(2, 12))
        qs, qt = r.standard_normal(n) * 2, r.standard_normal(n) * 2
        h = KDHyper(alpha=float(r.uniform()), beta=float(r.uniform(0.1, 1)), tau=float(r.uniform(0.5, 4)))
        label = int(r.integers(n))
        _, g = kd_loss(qs, qt, label, h)
        fd = np.zeros(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1e-6
            fd[i] = (kd_loss(qs + e, qt, label, h)[0] - kd_loss(qs - e, qt, label, h)[0]) / 2e-6
        worst = max(worst, np.linalg.norm(fd - g) / np.linalg.norm(g))
    assert worst <= 1e-6


def test_kd_loss_special_cases():
    q = np.array([1.0, -2.0, 0.5])
    loss, g = kd_loss(q, q, 0, KDHyper(alpha=0, beta=1))
    assert abs(loss) < 1e-15 and np.abs(g).max() < 1e-15
    # With beta = 0 the loss is plain cross-entropy.
    loss, g = kd_loss(q, np.zeros(3), 2, KDHyper(alpha=1, beta=0))
    p = np.exp(q) / np.exp(q).sum()
    assert loss == pytest.approx(-np.log(p[2]), rel=1e-14)
    np.testing.assert_allclose(g, p - np.eye(3)[2], atol=1e-15)
    with pytest.raises(ValueError):
        kd_loss(np.array([np.nan, 0.0]), np.zeros(2), 0, KDHyper())
    with pytest.raises(ValueError):
        kd_loss(np.zeros(2), np.zeros(3), 0, KDHyper())


def test_kd_hyper():
    assert (KDHyper.from_ratio(0.25).alpha, KDHyper.from_ratio(0.25).beta) == (0.75, 0.25)
    for bad in (dict(alpha=0, beta=0), dict(alpha=-1), dict(tau=0), dict(grad_accum=0)):
        with pytest.raises(ValueError):
            KDHyper(**bad)
    with pytest.raises(ValueError):
        KDHyper.from_ratio(1.5)


def test_majority_label_and_regions():
    assert list(region_of(np.arange(32), 32, 4)) == [0] * 8 + [1] * 8 + [2] * 8 + [3] * 8
    assert majority_label([0, 1, 9, 31, 30, 29], 32, 4) == 3
    assert majority_label([0, 9, 17, 25], 32, 4) == 0  # four-way tie goes to the lowest region
    assert majority_label([31, 9, 10, 30], 32, 4) == 1  # 1 vs 3 tie


def test_toy_dataset_balanced_and_labelled():
    d = make_toy_dataset(400, seed=3)
    assert d.tokens.shape == (400, 10) and d.tokens.max() < 32
    assert all(majority_label(t, 32, 4) == y for t, y in zip(d.tokens, d.labels))
    counts = np.bincount(d.labels, minlength=4)
    assert counts.min() > 60
    assert np.array_equal(d.tokens, make_toy_dataset(400, seed=3).tokens)
    assert list(d.label_tokens) == [0, 1, 2, 3]
    assert len(d.subset(np.arange(10))) == 10
    with pytest.raises(ValueError):
        make_toy_dataset(0)
    with pytest.raises(ValueError):
        make_toy_dataset(5, vocab_size=8, num_regions=4, label_offset=6)


def test_teacher_oracle_caches():
    calls = []

    def fn(batch):
        calls.append(len(batch))
        return batch.astype(float)

    orc = TeacherOracle("x", fn)
    orc(np.array([[1, 2], [3, 4]]))
    out = orc(np.array([[3, 4], [5, 6]]))
    assert calls == [2, 1] and orc.queries == 3
    assert np.array_equal(out, [[3.0, 4.0], [5.0, 6.0]])


@pytest.fixture(scope="module")
def tiny_task():
    train = make_toy_dataset(120, vocab_size=16, seq_len=5, seed=0)
    test = make_toy_dataset(80, vocab_size=16, seq_len=5, seed=1)
    teacher = init_model(ModelConfig(16, 6, 6, 1, 5, seed=0))
    student = init_model(ModelConfig(16, 4, 4, 1, 5, seed=1))
    return train, test, teacher, student


def test_distill_deterministic_and_logged(tiny_task):
    train, test, teacher, student = tiny_task
    h = KDHyper(alpha=0.5, beta=0.5, epochs=2, lr=3e-3, seed=4, grad_accum=2)
    a = distill(student, plain_teacher(teacher), train, test, h)
    b = distill(student, plain_teacher(teacher), train, test, h)
    assert [m.train_loss for m in a.metrics] == [m.train_loss for m in b.metrics]
    assert a.metrics[-1].mode == "plain" and len(a.metrics) == 2
    assert a.initial_acc == eval_accuracy(student, test)
    assert a.student is not student


def test_distill_ce_only_never_queries(tiny_task):
    train, test, teacher, student = tiny_task
    orc = plain_teacher(teacher)
    res = distill(student, orc, train, test, KDHyper(alpha=1, beta=0, epochs=1))
    assert orc.queries == 0 and res.metrics[0].mode == "ce_only"
    with pytest.raises(ValueError):
        distill(student, None, train, test, KDHyper(epochs=1))


def test_distill_full_readout_runs(tiny_task):
    train, test, teacher, student = tiny_task
    res = distill(student, plain_teacher(teacher), train, test, KDHyper(epochs=1), readout="full")
    assert np.isfinite(res.metrics[0].train_loss)
    with pytest.raises(ValueError):
        distill(student, plain_teacher(teacher), train, test, KDHyper(epochs=1), readout="bogus")


def test_accuracy_and_correlation(tiny_task):
    _, test, teacher, _ = tiny_task
    logits = last_logits(teacher, test.tokens)
    assert accuracy_from_logits(logits, test) == eval_accuracy(teacher, test)
    perfect = np.zeros((len(test), 16))
    perfect[np.arange(len(test)), test.labels] = 5.0
    assert logits_label_correlation(perfect, test) == pytest.approx(1.0)
    assert accuracy_from_logits(perfect, test) == 1.0
