"""Single-head post-norm transformer: config, weights, forward, backprop, training.

One block computes, for an input ``x`` of shape ``(n, d)``::

    Q, K, V = x W_q, x W_k, x W_v
    u = softmax(Q Kᵀ / sqrt(k)) V W_o
    v = Norm(u + x; γ1, β1)
    z = (SiLU(v W_1) ⊙ v W_3) W_2
    y = Norm(z + v; γ2, β2)

and the model reads ``logits = y_last_block W_cls`` at every position. There is
no causal mask and, unless enabled, no positional term.
"""
from __future__ import annotations

import copy
import io
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator, Literal

import numpy as np

from . import tensor as T

NormKind = Literal["layernorm", "rmsnorm"]
NORM_KINDS: tuple[str, ...] = ("layernorm", "rmsnorm")
BLOCK_TENSORS = ("W_q", "W_k", "W_v", "W_o", "W_1", "W_3", "W_2", "gamma1", "beta1", "gamma2", "beta2")

MODEL_MAGIC = b"DLCK"
MODEL_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int
    ffn_dim: int
    num_layers: int
    max_seq_len: int
    norm_kind: str = "layernorm"
    attn_scale: int | None = None
    use_positional: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.attn_scale is None:
            object.__setattr__(self, "attn_scale", self.model_dim)
        problems = []
        if self.vocab_size < 2:
            problems.append("vocab_size must be >= 2")
        if self.model_dim < 2:
            problems.append("model_dim must be >= 2")
        if self.ffn_dim < 1:
            problems.append("ffn_dim must be >= 1")
        if self.num_layers < 1:
            problems.append("num_layers must be >= 1")
        if self.max_seq_len < 1:
            problems.append("max_seq_len must be >= 1")
        if self.norm_kind not in NORM_KINDS:
            problems.append(f"norm_kind must be one of {NORM_KINDS}")
        if self.attn_scale < 1:
            problems.append("attn_scale must be >= 1")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must fit in 64 bits")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        if "model_dim" in kw and "attn_scale" not in kw:
            d["attn_scale"] = None
        d.update(kw)
        return ModelConfig(**d)


@dataclass
class BlockWeights:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    W_1: np.ndarray
    W_3: np.ndarray
    W_2: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray


@dataclass
class PlainModel:
    config: ModelConfig
    W_emb: np.ndarray
    blocks: list[BlockWeights]
    W_cls: np.ndarray
    pos_emb: np.ndarray | None = None

    obfuscated = False

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Tensors in the canonical file order."""
        yield "W_emb", self.W_emb
        if self.pos_emb is not None:
            yield "pos_emb", self.pos_emb
        for i, b in enumerate(self.blocks):
            for name in BLOCK_TENSORS:
                yield f"blocks.{i}.{name}", getattr(b, name)
        yield "W_cls", self.W_cls

    def get(self, name: str) -> np.ndarray:
        if name.startswith("blocks."):
            _, i, attr = name.split(".")
            return getattr(self.blocks[int(i)], attr)
        return getattr(self, name)

    def set(self, name: str, value: np.ndarray) -> None:
        if name.startswith("blocks."):
            _, i, attr = name.split(".")
            setattr(self.blocks[int(i)], attr, value)
        else:
            setattr(self, name, value)

    def copy(self) -> "PlainModel":
        return copy.deepcopy(self)

    def validate(self) -> None:
        c = self.config
        V, d, m, n = c.vocab_size, c.model_dim, c.ffn_dim, c.max_seq_len
        if len(self.blocks) != c.num_layers:
            raise ConfigError(f"{len(self.blocks)} blocks for num_layers={c.num_layers}")
        if (self.pos_emb is not None) != c.use_positional:
            raise ConfigError("pos_emb presence disagrees with use_positional")
        for name, arr in self.named_tensors():
            expected = _expected_shape(name, V, d, m, n)
            if arr.shape != expected:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {expected}")


@dataclass
class ObfuscatedModel(PlainModel):
    """Weights transformed by a permutation secret; only usable with authorised inputs."""

    secret_fingerprint: int = 0

    obfuscated = True


def _expected_shape(name: str, V: int, d: int, m: int, n: int) -> tuple[int, ...]:
    attr = name.rsplit(".", 1)[-1]
    return {
        "W_emb": (V, d),
        "pos_emb": (n, d),
        "W_cls": (d, V),
        "W_q": (d, d),
        "W_k": (d, d),
        "W_v": (d, d),
        "W_o": (d, d),
        "W_1": (d, m),
        "W_3": (d, m),
        "W_2": (m, d),
    }.get(attr, (d,))


def init_model(config: ModelConfig) -> PlainModel:
    """Gaussian init with std ``1/sqrt(d)``; gammas 1, betas 0."""
    V, d, m, n = config.vocab_size, config.model_dim, config.ffn_dim, config.max_seq_len
    rng = np.random.default_rng(config.seed)
    std = 1.0 / math.sqrt(d)

    def g(*shape: int) -> np.ndarray:
        return rng.normal(0.0, std, size=shape)

    W_emb = g(V, d)
    pos_emb = g(n, d) if config.use_positional else None
    blocks = [
        BlockWeights(
            W_q=g(d, d), W_k=g(d, d), W_v=g(d, d), W_o=g(d, d),
            W_1=g(d, m), W_3=g(d, m), W_2=g(m, d),
            gamma1=np.ones(d), beta1=np.zeros(d), gamma2=np.ones(d), beta2=np.zeros(d),
        )
        for _ in range(config.num_layers)
    ]
    return PlainModel(config=config, W_emb=W_emb, blocks=blocks, W_cls=g(d, V), pos_emb=pos_emb)


# --------------------------------------------------------------------------- forward


def _norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, kind: str) -> np.ndarray:
    if kind == "rmsnorm":
        return T.rmsnorm(x, gamma)
    return T.layernorm(x, gamma, beta)


def block_forward(bw: BlockWeights, x: np.ndarray, config: ModelConfig, cache: dict | None = None) -> np.ndarray:
    Q = T.matmul(x, bw.W_q)
    K = T.matmul(x, bw.W_k)
    Vv = T.matmul(x, bw.W_v)
    S = T.matmul(Q, np.swapaxes(K, -1, -2))
    P = T.softmax_rows(S, temperature=math.sqrt(config.attn_scale))
    C = T.matmul(P, Vv)
    u = T.matmul(C, bw.W_o)
    a = T.add(u, x)
    v = _norm(a, bw.gamma1, bw.beta1, config.norm_kind)
    g1 = T.matmul(v, bw.W_1)
    g3 = T.matmul(v, bw.W_3)
    s = T.silu(g1)
    h = T.mul(s, g3)
    z = T.matmul(h, bw.W_2)
    b = T.add(z, v)
    y = _norm(b, bw.gamma2, bw.beta2, config.norm_kind)
    if cache is not None:
        cache.update(x=x, Q=Q, K=K, V=Vv, P=P, C=C, a=a, v=v, g1=g1, g3=g3, s=s, h=h, b=b)
    return y


def _check_ids(ids: np.ndarray, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (not np.issubdtype(ids.dtype, np.integer)):
        raise ValueError("token ids must be integers")
    ids = ids.astype(np.int64)
    if ids.shape[-1] < 1 or ids.shape[-1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[-1]} outside [1, {config.max_seq_len}]")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    return ids


def embed(model: PlainModel, ids) -> np.ndarray:
    """Token embedding lookup ``one-hot(ids) · W_emb`` (no positional term)."""
    ids = _check_ids(ids, model.config)
    T.record("gather", ids.size * model.config.model_dim)
    return model.W_emb[ids].astype(np.float64)


def hidden_states(model: PlainModel, x: np.ndarray) -> np.ndarray:
    """Positional term (if any) plus the block stack applied to embedded input."""
    if model.pos_emb is not None:
        x = T.add(x, model.pos_emb[: x.shape[-2]])
    for bw in model.blocks:
        x = block_forward(bw, x, model.config)
    return x


def forward_embedded(model: PlainModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = model.config.model_dim
    if x.ndim < 2 or x.shape[-1] != d or not 1 <= x.shape[-2] <= model.config.max_seq_len:
        raise T.ShapeError(f"embedded input has shape {x.shape}, expected (seq_len<= {model.config.max_seq_len}, {d})")
    return T.matmul(hidden_states(model, x), model.W_cls)


def forward(model: PlainModel, token_ids) -> np.ndarray:
    """Logits at every position: ``(seq_len, V)``, or ``(B, seq_len, V)`` for a batch."""
    return forward_embedded(model, embed(model, token_ids))


def last_logits(model: PlainModel, token_ids) -> np.ndarray:
    """Final-position logits for a batch of sequences, shape ``(B, V)``."""
    y = hidden_states(model, embed(model, np.atleast_2d(token_ids)))
    return T.matmul(y[:, -1, :], model.W_cls)


# --------------------------------------------------------------------------- backward

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _norm_backward(dy, x, gamma, kind, eps=T.DEFAULT_EPS):
    if kind == "rmsnorm":
        r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
        xhat = x / r
        dxhat = dy * gamma
        dx = (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / r
        return dx, (dy * xhat).reshape(-1, x.shape[-1]).sum(0), np.zeros_like(gamma)
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) / sigma
    dxhat = dy * gamma
    dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma
    flat = lambda t: t.reshape(-1, x.shape[-1])  # noqa: E731
    return dx, flat(dy * xhat).sum(0), flat(dy).sum(0)


def _wgrad(inp: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def _block_backward(bw: BlockWeights, c: dict, dy: np.ndarray, config: ModelConfig, g: dict, prefix: str):
    kind = config.norm_kind
    db, g[prefix + "gamma2"], g[prefix + "beta2"] = _norm_backward(dy, c["b"], bw.gamma2, kind)
    g[prefix + "W_2"] = _wgrad(c["h"], db)
    dh = db @ bw.W_2.T
    ds = dh * c["g3"]
    dg3 = dh * c["s"]
    sig = T.sigmoid(c["g1"])
    dg1 = ds * sig * (1.0 + c["g1"] * (1.0 - sig))
    g[prefix + "W_1"] = _wgrad(c["v"], dg1)
    g[prefix + "W_3"] = _wgrad(c["v"], dg3)
    dv = db + dg1 @ bw.W_1.T + dg3 @ bw.W_3.T
    da, g[prefix + "gamma1"], g[prefix + "beta1"] = _norm_backward(dv, c["a"], bw.gamma1, kind)
    g[prefix + "W_o"] = _wgrad(c["C"], da)
    dC = da @ bw.W_o.T
    P = c["P"]
    dP = dC @ np.swapaxes(c["V"], -1, -2)
    dVv = np.swapaxes(P, -1, -2) @ dC
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / math.sqrt(config.attn_scale)
    dQ = dS @ c["K"]
    dK = np.swapaxes(dS, -1, -2) @ c["Q"]
    x = c["x"]
    g[prefix + "W_q"] = _wgrad(x, dQ)
    g[prefix + "W_k"] = _wgrad(x, dK)
    g[prefix + "W_v"] = _wgrad(x, dVv)
    return da + dQ @ bw.W_q.T + dK @ bw.W_k.T + dVv @ bw.W_v.T


def loss_and_grads(model: PlainModel, token_ids, loss_fn: LossFn) -> tuple[float, dict[str, np.ndarray]]:
    """Run a batch and backpropagate ``loss_fn`` applied to final-position logits.

    ``loss_fn`` maps the ``(B, V)`` logits to ``(loss, dloss/dlogits)``.
    Returns the loss and a gradient for every tensor in :meth:`PlainModel.named_tensors`.
    """
    cfg = model.config
    ids = _check_ids(np.atleast_2d(token_ids), cfg)
    n = ids.shape[-1]
    x = model.W_emb[ids].astype(np.float64)
    if model.pos_emb is not None:
        x = x + model.pos_emb[:n]
    caches = []
    for bw in model.blocks:
        c: dict = {}
        x = block_forward(bw, x, cfg, cache=c)
        caches.append(c)
    y_last = x[:, -1, :]
    logits = T.matmul(y_last, model.W_cls)
    loss, dlogits = loss_fn(logits)

    grads: dict[str, np.ndarray] = {"W_cls": y_last.T @ dlogits}
    dx = np.zeros_like(x)
    dx[:, -1, :] = dlogits @ model.W_cls.T
    for i in reversed(range(len(model.blocks))):
        dx = _block_backward(model.blocks[i], caches[i], dx, cfg, grads, f"blocks.{i}.")
    if model.pos_emb is not None:
        dpos = np.zeros_like(model.pos_emb)
        dpos[:n] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
    demb = np.zeros_like(model.W_emb)
    np.add.at(demb, ids.reshape(-1), dx.reshape(-1, cfg.model_dim))
    grads["W_emb"] = demb
    return float(loss), grads


def label_ce(label_tokens, labels) -> LossFn:
    """Mean cross-entropy over the label-token slice of the final-position logits."""
    label_tokens = np.asarray(label_tokens)
    labels = np.asarray(labels)

    def fn(logits: np.ndarray) -> tuple[float, np.ndarray]:
        sub = logits[:, label_tokens]
        logp = T.log_softmax_rows(sub)
        B = sub.shape[0]
        loss = -logp[np.arange(B), labels].mean()
        dsub = np.exp(logp)
        dsub[np.arange(B), labels] -= 1.0
        dlogits = np.zeros_like(logits)
        dlogits[:, label_tokens] = dsub / B
        return float(loss), dlogits

    return fn


# --------------------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, model: PlainModel, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.named_tensors()}
        self.v = {k: np.zeros_like(v) for k, v in model.named_tensors()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.model.named_tensors():
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class SGD:
    def __init__(self, model: PlainModel, lr: float = 1e-2):
        self.model, self.lr = model, lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.model.named_tensors():
            p -= self.lr * grads[name]


@dataclass
class TrainHyper:
    lr: float = 3e-3
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"


def make_optimizer(model: PlainModel, name: str, lr: float):
    if name == "adam":
        return Adam(model, lr=lr)
    if name == "sgd":
        return SGD(model, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def batches(n_samples: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start : start + batch_size]


@dataclass
class TrainResult:
    model: PlainModel
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def train_teacher(model: PlainModel, dataset, hyper: TrainHyper) -> TrainResult:
    """Cross-entropy training on final-position label-token logits.

    ``dataset`` needs ``tokens`` (N, n), ``labels`` (N,) and ``label_tokens``.
    The input model is not modified.
    """
    if len(dataset.labels) == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    opt = make_optimizer(model, hyper.optimizer, hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    result = TrainResult(model=model)
    for _ in range(hyper.epochs):
        total = 0.0
        for idx in batches(len(dataset.labels), hyper.batch_size, rng):
            loss, grads = loss_and_grads(
                model, dataset.tokens[idx], label_ce(dataset.label_tokens, dataset.labels[idx])
            )
            opt.step(grads)
            result.losses.append(loss)
            total += loss * len(idx)
        result.epoch_losses.append(total / len(dataset.labels))
    return result


# --------------------------------------------------------------------------- file format

_CFG_STRUCT = struct.Struct("<IIIIIBIBQ")
_HDR_STRUCT = struct.Struct("<4sHB")


class FormatError(ValueError):
    pass


def _pack_config(c: ModelConfig) -> bytes:
    return _CFG_STRUCT.pack(
        c.vocab_size, c.model_dim, c.ffn_dim, c.num_layers, c.max_seq_len,
        NORM_KINDS.index(c.norm_kind), c.attn_scale, int(c.use_positional), c.seed,
    )


def model_to_bytes(model: PlainModel) -> bytes:
    model.validate()
    buf = io.BytesIO()
    buf.write(_HDR_STRUCT.pack(MODEL_MAGIC, MODEL_VERSION, int(model.obfuscated)))
    buf.write(_pack_config(model.config))
    for _, arr in model.named_tensors():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if model.obfuscated:
        buf.write(struct.pack("<Q", model.secret_fingerprint))
    return buf.getvalue()


def model_from_bytes(data: bytes) -> PlainModel:
    view = memoryview(data)
    if len(view) < _HDR_STRUCT.size + _CFG_STRUCT.size:
        raise FormatError("model file truncated")
    magic, version, obf = _HDR_STRUCT.unpack_from(view, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    V, d, m, L, n, norm, scale, pos, seed = _CFG_STRUCT.unpack_from(view, _HDR_STRUCT.size)
    if norm >= len(NORM_KINDS):
        raise FormatError(f"bad norm kind {norm}")
    try:
        cfg = ModelConfig(V, d, m, L, n, NORM_KINDS[norm], scale, bool(pos), seed)
    except ConfigError as exc:
        raise FormatError(str(exc)) from None
    off = _HDR_STRUCT.size + _CFG_STRUCT.size
    skeleton = init_shapes(cfg)
    tensors = {}
    for name, arr in skeleton.named_tensors():
        nbytes = 4 * arr.size
        if off + nbytes > len(view):
            raise FormatError("model file truncated")
        tensors[name] = np.frombuffer(view[off : off + nbytes], dtype="<f4").astype(np.float64).reshape(arr.shape)
        off += nbytes
    for name, arr in tensors.items():
        skeleton.set(name, arr)
    if obf:
        if off + 8 > len(view):
            raise FormatError("model file truncated")
        (fp,) = struct.unpack_from("<Q", view, off)
        off += 8
        skeleton = ObfuscatedModel(
            config=cfg, W_emb=skeleton.W_emb, blocks=skeleton.blocks, W_cls=skeleton.W_cls,
            pos_emb=skeleton.pos_emb, secret_fingerprint=fp,
        )
    if off != len(view):
        raise FormatError(f"{len(view) - off} trailing bytes in model file")
    return skeleton


def init_shapes(config: ModelConfig) -> PlainModel:
    """A zero-filled model with the right tensor shapes."""
    V, d, m, n = config.vocab_size, config.model_dim, config.ffn_dim, config.max_seq_len
    z = np.zeros
    blocks = [
        BlockWeights(z((d, d)), z((d, d)), z((d, d)), z((d, d)), z((d, m)), z((d, m)), z((m, d)),
                     z(d), z(d), z(d), z(d))
        for _ in range(config.num_layers)
    ]
    return PlainModel(config, z((V, d)), blocks, z((d, V)), z((n, d)) if config.use_positional else None)


def round_to_f32(model: PlainModel) -> PlainModel:
    """Copy with every tensor rounded through single precision, as a file round-trip would."""
    out = model.copy()
    for name, arr in out.named_tensors():
        out.set(name, arr.astype(np.float32).astype(np.float64))
    return out


def save_model(model: PlainModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> PlainModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
