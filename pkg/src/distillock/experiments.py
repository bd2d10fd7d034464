"""Toy-scale experiment presets: lockdown, surrogate attack and TEE FLOPs."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

from . import flops
from .attack import AttackBudget, AttackReport, AttackScheme, relative_table, run_attack
from .enclave import Enclave, SeededPads
from .kd import (
    DistillResult,
    KDHyper,
    accuracy_from_logits,
    authorized_teacher,
    distill,
    eval_accuracy,
    logits_label_correlation,
    make_toy_dataset,
    plain_teacher,
    unauthorized_teacher,
)
from .model import ModelConfig, PlainModel, TrainHyper, init_model, last_logits, train_teacher
from .obfuscate import gen_secret, obfuscate_model
from .pipeline import LoopbackPipeline
from .worker import Worker

log = logging.getLogger(__name__)

MODES = ("authorized", "unauthorized", "plain")


@dataclass
class ToyTask:
    vocab_size: int = 32
    seq_len: int = 10
    num_regions: int = 4
    n_train: int = 2000
    n_test: int = 1000

    def data(self, seed: int):
        kw = dict(vocab_size=self.vocab_size, seq_len=self.seq_len, num_regions=self.num_regions)
        return make_toy_dataset(self.n_train, seed=seed, **kw), make_toy_dataset(self.n_test, seed=seed + 1000, **kw)

    @property
    def chance(self) -> float:
        return 1.0 / self.num_regions


@dataclass
class LockdownPreset:
    task: ToyTask = field(default_factory=ToyTask)
    teacher_dim: int = 16
    teacher_ffn: int = 32
    teacher_layers: int = 2
    student_dim: int = 8
    student_ffn: int = 16
    student_layers: int = 1
    teacher_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(lr=3e-3, epochs=8, batch_size=16))
    kd_ratio: float = 1.0
    tau: float = 2.0
    kd_lr: float = 3e-3
    kd_epochs: int = 8
    kd_batch_size: int = 16
    seeds: tuple[int, ...] = (0, 1, 2)

    def teacher_config(self, seed: int) -> ModelConfig:
        t = self.task
        return ModelConfig(t.vocab_size, self.teacher_dim, self.teacher_ffn, self.teacher_layers, t.seq_len, seed=seed)

    def student_config(self, seed: int) -> ModelConfig:
        t = self.task
        return ModelConfig(
            t.vocab_size, self.student_dim, self.student_ffn, self.student_layers, t.seq_len, seed=seed + 50
        )

    def kd_hyper(self, seed: int) -> KDHyper:
        return KDHyper.from_ratio(
            self.kd_ratio, tau=self.tau, lr=self.kd_lr, epochs=self.kd_epochs, batch_size=self.kd_batch_size, seed=seed
        )


PRESETS = ("figure2-analog", "table1-analog", "table2")


def train_toy_teacher(preset: LockdownPreset, seed: int) -> PlainModel:
    train, _ = preset.task.data(seed)
    hyper = TrainHyper(**{**preset.teacher_hyper.__dict__, "seed": seed})
    return train_teacher(init_model(preset.teacher_config(seed)), train, hyper).model


@dataclass
class LockdownRun:
    seed: int
    teacher_acc: float
    baseline_acc: float
    unauthorized_teacher_acc: float
    unauthorized_correlation: float
    results: dict[str, DistillResult]


def run_lockdown_seed(preset: LockdownPreset, seed: int, modes=MODES) -> LockdownRun:
    """Distil one student per mode from the same teacher, data and student init."""
    train, test = preset.task.data(seed)
    teacher = train_toy_teacher(preset, seed)
    secret = gen_secret(preset.task.vocab_size, preset.teacher_dim, seed + 7)
    obf = obfuscate_model(teacher, secret)
    student = init_model(preset.student_config(seed))
    h = preset.kd_hyper(seed)

    oracles = {
        "authorized": lambda: authorized_teacher(
            LoopbackPipeline(Enclave(secret, SeededPads(teacher.W_emb, seed=seed)), Worker(obf))
        ),
        "unauthorized": lambda: unauthorized_teacher(obf),
        "plain": lambda: plain_teacher(teacher),
    }
    results = {}
    for mode in modes:
        results[mode] = distill(student, oracles[mode](), train, test, h)
        log.info("seed %d %s: %.3f", seed, mode, results[mode].final_acc)
    ul = last_logits(obf, test.tokens)
    return LockdownRun(
        seed=seed,
        teacher_acc=eval_accuracy(teacher, test),
        baseline_acc=eval_accuracy(student, test),
        unauthorized_teacher_acc=accuracy_from_logits(ul, test),
        unauthorized_correlation=logits_label_correlation(ul, test),
        results=results,
    )


def run_lockdown(preset: LockdownPreset | None = None, modes=MODES) -> list[LockdownRun]:
    preset = preset or LockdownPreset()
    return [run_lockdown_seed(preset, s, modes) for s in preset.seeds]


def lockdown_csv(runs: list[LockdownRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "mode", "epoch", "train_loss", "eval_acc"])
    for run in runs:
        w.writerow([run.seed, "baseline", 0, "", repr(run.baseline_acc)])
        for mode, res in run.results.items():
            for m in res.metrics:
                w.writerow([run.seed, mode, m.epoch, repr(m.train_loss), repr(m.eval_acc)])
    return buf.getvalue()


def lockdown_summary(runs: list[LockdownRun], chance: float) -> str:
    lines = [f"{'seed':>4}  {'teacher':>7}  {'baseline':>8}  " + "  ".join(f"{m:>12}" for m in runs[0].results)]
    for r in runs:
        accs = "  ".join(f"{res.final_acc:12.3f}" for res in r.results.values())
        lines.append(f"{r.seed:>4}  {r.teacher_acc:7.3f}  {r.baseline_acc:8.3f}  {accs}")
    lines.append(f"chance = {chance:.3f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- attack


@dataclass
class AttackPreset:
    lockdown: LockdownPreset = field(default_factory=LockdownPreset)
    teacher_seed: int = 0
    secret_seed: int = 7
    budget: AttackBudget = field(default_factory=AttackBudget)
    train_size: int = 1000
    test_size: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2)


def run_attack_suite(preset: AttackPreset | None = None, schemes=tuple(AttackScheme)) -> dict[AttackScheme, AttackReport]:
    preset = preset or AttackPreset()
    teacher = train_toy_teacher(preset.lockdown, preset.teacher_seed)
    obf = obfuscate_model(teacher, gen_secret(teacher.config.vocab_size, teacher.config.model_dim, preset.secret_seed))
    out = {}
    for scheme in schemes:
        out[AttackScheme(scheme)] = run_attack(
            scheme,
            teacher,
            obf,
            train_size=preset.train_size,
            test_size=preset.test_size,
            budget=preset.budget,
            seeds=preset.seeds,
            num_regions=preset.lockdown.task.num_regions,
        )
    return out


def attack_summary(reports: dict[AttackScheme, AttackReport]) -> str:
    rel = relative_table(reports) if AttackScheme.BLACKBOX in reports else {}
    lines = [f"{'scheme':<11} {'mean':>6} {'std':>6} {'relative':>8}"]
    for scheme, r in reports.items():
        rv = f"{rel[scheme]:8.3f}" if scheme in rel else f"{'':>8}"
        lines.append(f"{scheme.value:<11} {r.mean:6.3f} {r.std:6.3f} {rv}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- flops


def run_flops_table(token_count: int | None = None) -> list[flops.FlopsReport]:
    out = []
    for name in flops.reference_configs():
        cfg, seq_len = flops.reference_config(name)
        out.append(flops.report(cfg, seq_len, token_count, name=name))
    return out


def flops_csv(reports: list[flops.FlopsReport]) -> str:
    parts = [r.to_csv() for r in reports]
    header = parts[0].split("\n", 1)[0] + "\n"
    return header + "".join(p.split("\n", 1)[1] for p in parts)


__all__ = [
    "AttackPreset",
    "LockdownPreset",
    "LockdownRun",
    "MODES",
    "PRESETS",
    "ToyTask",
    "attack_summary",
    "flops_csv",
    "lockdown_csv",
    "lockdown_summary",
    "run_attack_suite",
    "run_flops_table",
    "run_lockdown",
    "run_lockdown_seed",
    "train_toy_teacher",
]
