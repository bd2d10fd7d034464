"""``distillock`` command-line entry point."""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import signal
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import experiments as X
from .attack import AttackBudget, AttackScheme, reports_csv, run_attack
from .enclave import Enclave, PadPool
from .flops import report as flops_report
from .kd import (
    KDHyper,
    authorized_teacher,
    distill,
    eval_accuracy,
    make_toy_dataset,
    plain_teacher,
    unauthorized_teacher,
)
from .model import (
    ConfigError,
    FormatError,
    ModelConfig,
    TrainHyper,
    forward,
    init_model,
    load_model,
    save_model,
    train_teacher,
)
from .obfuscate import (
    gen_pad_pool,
    gen_secret,
    load_pads,
    load_secret,
    min_hot_count,
    obfuscate_model,
    save_pads,
    save_secret,
)
from .pipeline import RemotePipeline
from .protocol import ProtocolError
from .service import MessageServer
from .verify import rel_err, run_all
from .worker import run_worker

log = logging.getLogger("distillock")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_PROTOCOL = 0, 2, 3, 4

UNAUTHORIZED_BANNER = (
    "WARNING: unauthorized inference. Raw token ids were sent to the obfuscated model\n"
    "without enclave authorization; the logits below are not meaningful."
)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def read_config(path) -> dict:
    """YAML (or JSON) mapping from ``path``."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a key/value mapping")
    return data


def write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def parse_ids(text: str) -> np.ndarray:
    try:
        return np.array([int(t) for t in text.split(",") if t.strip()], dtype=np.int64)
    except ValueError:
        raise CliError(f"--ids expects comma-separated integers, got {text!r}") from None


def _data_spec(spec: dict, cfg: ModelConfig, key: str, default_n: int, default_seed: int):
    return make_toy_dataset(
        int(spec.get(key, default_n)),
        vocab_size=cfg.vocab_size,
        seq_len=int(spec.get("seq_len", cfg.max_seq_len)),
        num_regions=int(spec.get("num_regions", 4)),
        seed=int(spec.get(f"{key}_seed", default_seed)),
    )


# --------------------------------------------------------------------------- child processes


def _spawn(args: list[str]) -> tuple[subprocess.Popen, str]:
    proc = subprocess.Popen(
        [sys.executable, "-m", "distillock.cli", *args],
        stdout=subprocess.PIPE,
        text=True,
    )
    line = proc.stdout.readline().strip()
    if not line.startswith("listening "):
        proc.kill()
        raise CliError(f"child {args[0]} failed to start", EXIT_PROTOCOL)
    return proc, line.split(" ", 1)[1]


@contextlib.contextmanager
def spawned_services(secret: str, pads: str, model: str):
    """Start enclave and worker child processes; yields ``(enclave_addr, worker_addr)``."""
    procs = []
    try:
        enc, enc_addr = _spawn(["serve-enclave", "--secret", secret, "--pads", pads, "--listen", "127.0.0.1:0"])
        procs.append(enc)
        wrk, wrk_addr = _spawn(["serve-worker", "--model", model, "--listen", "127.0.0.1:0", "--enclave", enc_addr])
        procs.append(wrk)
        yield enc_addr, wrk_addr
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()


@contextlib.contextmanager
def _pipeline_from_args(a):
    """Remote pipeline from --enclave/--worker, or spawned children from --secret/--pads/--teacher."""
    if a.enclave and a.worker:
        with RemotePipeline(a.enclave, a.worker) as pipe:
            yield pipe
    elif a.secret and a.pads and a.teacher:
        with spawned_services(a.secret, a.pads, a.teacher) as (e, w), RemotePipeline(e, w) as pipe:
            yield pipe
    else:
        raise CliError("authorized mode needs --enclave and --worker, or --secret, --pads and --teacher")


def _serve(server: MessageServer) -> int:
    print(f"listening {server.address}", flush=True)
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


# --------------------------------------------------------------------------- subcommands


def cmd_gen_model(a) -> int:
    cfg = ModelConfig.from_dict({**read_config(a.config), "seed": a.seed})
    save_model(init_model(cfg), a.out)
    log.info("wrote %s", a.out)
    return EXIT_OK


def cmd_train_teacher(a) -> int:
    model = load_model(a.model)
    spec = read_config(a.data_spec)
    train = _data_spec(spec, model.config, "n_train", 2000, 0)
    test = _data_spec(spec, model.config, "n_test", 1000, 1000)
    hyper = TrainHyper(
        lr=float(spec.get("lr", 3e-3)),
        epochs=int(spec.get("epochs", 8)),
        batch_size=int(spec.get("batch_size", 16)),
        seed=int(spec.get("seed", 0)),
    )
    result = train_teacher(model, train, hyper)
    save_model(result.model, a.out)
    acc = eval_accuracy(result.model, test)
    lines = ["epoch,train_loss"] + [f"{i},{v!r}" for i, v in enumerate(result.epoch_losses, 1)]
    write_text(a.losses, "\n".join(lines) + "\n")
    print(f"test accuracy {acc:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_obfuscate(a) -> int:
    plain = load_model(a.model)
    secret = gen_secret(plain.config.vocab_size, plain.config.model_dim, a.seed)
    save_model(obfuscate_model(plain, secret), a.out_model)
    save_secret(secret, a.out_secret)
    print(f"fingerprint {secret.fingerprint:#018x}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_pads(a) -> int:
    plain = load_model(a.model)
    secret = load_secret(a.secret)
    if secret.vocab_size != plain.config.vocab_size:
        raise CliError("secret and model disagree on vocabulary size")
    k = a.k if a.k is not None else min_hot_count(plain.config.vocab_size)
    seq_len = a.seq_len or plain.config.max_seq_len
    pads = gen_pad_pool(plain.W_emb, seq_len, k, a.count, a.seed)
    save_pads(pads, plain.config.vocab_size, secret.fingerprint, a.out)
    return EXIT_OK


def cmd_serve_enclave(a) -> int:
    secret = load_secret(a.secret)
    pads, vocab, fp = load_pads(a.pads)
    if fp != secret.fingerprint or vocab != secret.vocab_size:
        raise CliError("pad file was generated for a different secret")
    enclave = Enclave(secret, PadPool(pads))
    return _serve(MessageServer(enclave.handle, a.listen, vocab_size=secret.vocab_size))


def cmd_serve_worker(a) -> int:
    return _serve(run_worker(a.listen, a.model, a.enclave))


def cmd_infer(a) -> int:
    ids = parse_ids(a.ids)
    if a.unauthorized:
        if not a.worker:
            raise CliError("--unauthorized needs --worker")
        with RemotePipeline(a.worker, a.worker, check_pairing=False) as pipe:
            logits = pipe.infer_unauthorized(ids)
        print(UNAUTHORIZED_BANNER, file=sys.stderr)
    else:
        with _pipeline_from_args(a) as pipe:
            logits = pipe.infer(ids)
    for row in logits:
        print(",".join(repr(float(v)) for v in row))
    if a.reference:
        ref = forward(load_model(a.reference), ids)
        err = rel_err(logits, ref)
        print(f"max relative |Δlogit| vs reference: {err:.3e}", file=sys.stderr)
        if not a.unauthorized and err > 1e-9:
            return EXIT_VERIFY
    return EXIT_OK


def cmd_distill(a) -> int:
    if a.preset:
        if a.preset != "figure2-analog":
            raise CliError(f"distill supports --preset figure2-analog, not {a.preset!r}")
        preset = X.LockdownPreset()
        runs = X.run_lockdown(preset)
        write_text(a.metrics, X.lockdown_csv(runs))
        print(X.lockdown_summary(runs, preset.task.chance), file=sys.stderr)
        return EXIT_OK
    if not (a.student_config and a.teacher and a.mode):
        raise CliError("distill needs --preset, or --mode, --teacher and --student-config")
    teacher = load_model(a.teacher)
    scfg = ModelConfig.from_dict({**read_config(a.student_config), "seed": a.seed + 50})
    spec = read_config(a.data_spec) if a.data_spec else {}
    train = _data_spec(spec, scfg, "n_train", 2000, a.seed)
    test = _data_spec(spec, scfg, "n_test", 1000, a.seed + 1000)
    h = KDHyper.from_ratio(a.kd_ratio, tau=a.tau, lr=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed)
    student = init_model(scfg)
    with contextlib.ExitStack() as stack:
        if a.mode == "authorized":
            oracle = authorized_teacher(stack.enter_context(_pipeline_from_args(a)))
        elif a.mode == "unauthorized":
            if not teacher.obfuscated:
                raise CliError("unauthorized mode expects the obfuscated teacher model")
            oracle = unauthorized_teacher(teacher)
        else:
            if teacher.obfuscated:
                raise CliError("plain mode expects the plain teacher model")
            oracle = plain_teacher(teacher)
        result = distill(student, oracle, train, test, h)
    lines = ["epoch,mode,train_loss,eval_acc", f"0,baseline,,{result.initial_acc!r}"]
    lines += [f"{m.epoch},{m.mode},{m.train_loss!r},{m.eval_acc!r}" for m in result.metrics]
    write_text(a.metrics, "\n".join(lines) + "\n")
    if a.out:
        save_model(result.student, a.out)
    print(f"{a.mode}: final accuracy {result.final_acc:.4f} (baseline {result.initial_acc:.4f})", file=sys.stderr)
    return EXIT_OK


def cmd_attack(a) -> int:
    budget = AttackBudget(
        lr=a.lr if a.lr is not None else AttackBudget.lr,
        epochs=a.epochs if a.epochs is not None else AttackBudget.epochs,
        batch_size=a.batch_size if a.batch_size is not None else AttackBudget.batch_size,
    )
    seeds = tuple(range(a.seeds))
    if a.preset or not (a.teacher and a.obfuscated):
        if a.preset not in (None, "table1-analog"):
            raise CliError(f"attack supports --preset table1-analog, not {a.preset!r}")
        schemes = tuple(AttackScheme) if a.scheme == "all" else (AttackScheme(a.scheme),)
        reports = X.run_attack_suite(X.AttackPreset(budget=budget, seeds=seeds), schemes)
    else:
        teacher, obf = load_model(a.teacher), load_model(a.obfuscated)
        schemes = tuple(AttackScheme) if a.scheme == "all" else (AttackScheme(a.scheme),)
        reports = {s: run_attack(s, teacher, obf, budget=budget, seeds=seeds) for s in schemes}
    write_text(a.report, reports_csv(reports))
    print(X.attack_summary(reports), file=sys.stderr)
    return EXIT_OK


def cmd_flops(a) -> int:
    if a.config:
        data = read_config(a.config)
        seq_len = int(data.pop("seq_len", data.get("max_seq_len", 1)))
        reports = [flops_report(ModelConfig.from_dict(data), seq_len, a.tokens, name=Path(a.config).stem)]
    else:
        reports = X.run_flops_table(a.tokens)
    if a.csv:
        write_text(a.csv, X.flops_csv(reports))
    print("\n".join(r.to_text() for r in reports))
    return EXIT_OK


def cmd_verify(a) -> int:
    results = run_all()
    for r in results:
        print(r.line())
    ok = all(r.ok for r in results)
    print("all checks passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


# --------------------------------------------------------------------------- parser


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--enclave", help="enclave address host:port")
    p.add_argument("--worker", help="worker address host:port")
    p.add_argument("--secret", help="secret file; with --pads and --teacher, spawn enclave and worker")
    p.add_argument("--pads", help="pad pool file (see gen-pads)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distillock", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="random plain model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_model)

    p = sub.add_parser("train-teacher", help="train a plain model on the toy task")
    p.add_argument("--model", required=True)
    p.add_argument("--data-spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--losses", help="per-epoch loss CSV (default stdout)")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("obfuscate", help="permute a plain model; writes the model and its secret")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-secret", required=True)
    p.set_defaults(fn=cmd_obfuscate)

    p = sub.add_parser("gen-pads", help="precompute a one-time pad pool for the enclave")
    p.add_argument("--model", required=True, help="plain model (for m·W_emb)")
    p.add_argument("--secret", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_pads)

    p = sub.add_parser("serve-enclave", help="run the simulated enclave service")
    p.add_argument("--secret", required=True)
    p.add_argument("--pads", required=True, help="pad pool file")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.set_defaults(fn=cmd_serve_enclave)

    p = sub.add_parser("serve-worker", help="run the untrusted worker service")
    p.add_argument("--model", required=True, help="obfuscated model")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--enclave", help="enclave address; refuse authorised traffic if fingerprints differ")
    p.set_defaults(fn=cmd_serve_worker)

    p = sub.add_parser("infer", help="one inference through enclave and worker")
    p.add_argument("--ids", required=True, help="comma-separated token ids")
    p.add_argument("--unauthorized", action="store_true", help="send raw ids straight to the worker")
    p.add_argument("--teacher", help="obfuscated model (when spawning services)")
    p.add_argument("--reference", help="plain model; report max relative logit difference")
    _add_pipeline_args(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("distill", help="knowledge distillation into a fresh student")
    p.add_argument("--preset", choices=["figure2-analog"])
    p.add_argument("--mode", choices=X.MODES)
    p.add_argument("--teacher", help="plain model for --mode plain, obfuscated otherwise")
    p.add_argument("--student-config")
    p.add_argument("--data-spec")
    p.add_argument("--kd-ratio", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", help="metrics CSV (default stdout)")
    p.add_argument("--out", help="save the distilled student")
    _add_pipeline_args(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("attack", help="surrogate fine-tuning attack")
    p.add_argument("--preset", choices=["table1-analog"])
    p.add_argument("--scheme", default="all", choices=["all"] + [s.value for s in AttackScheme])
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")
    p.add_argument("--teacher", help="plain teacher (default: train the preset teacher)")
    p.add_argument("--obfuscated", help="obfuscated teacher")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--report", help="CSV report (default stdout)")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("flops", help="TEE FLOPs per defence scheme")
    p.add_argument("--preset", choices=["table2"], help="both reference configs (the default)")
    p.add_argument("--config", help="model config file with an optional seq_len")
    p.add_argument("--tokens", type=int, help="token count (default one sequence)")
    p.add_argument("--csv", help="also write a CSV")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("verify", help="oracle-equivalence self checks")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("DISTILLOCK_LOG", "WARNING").upper(), None)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ConnectionError, TimeoutError) as exc:
        print(f"connection error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
