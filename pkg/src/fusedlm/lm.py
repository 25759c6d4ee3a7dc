"""Toy decoder-only language model used as a single specialist.

Pre-norm residual blocks (RMSNorm, causal multi-head attention, ReLU MLP),
learned absolute positions, and a zero-initialized output head so an untrained
model predicts the uniform distribution.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .checkpoint import load_arrays, save_arrays
from .data import TEMPLATES, DomainCorpus, PromptTemplate, TrainingExample, wrap_example
from .errors import CheckpointError, LengthError, TrainingError, VocabError
from .numcore import Tensor
from .optim import OptimizerState, adamw_step, clip_grad_norm, cosine_lr
from .tokenizer import DEFAULT_TOKENIZER, PAD

log = logging.getLogger(__name__)

INIT_STD = 0.02
NORM_EPS = 1e-6


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = DEFAULT_TOKENIZER.vocab_size
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    feedforward_mult: int = 4

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"LmConfig.{k} must be a positive int, got {v!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 800
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    warmup: int = 50


@dataclass
class SpecialistOutput:
    hidden: Tensor
    logits: Tensor


def init_params(cfg: LmConfig, seed: int, zero_head: bool = True) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_model * cfg.feedforward_mult
    resid_std = INIT_STD / math.sqrt(2 * cfg.n_layers)

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    p = {
        "tok_emb": normal((cfg.vocab_size, d), INIT_STD),
        "pos_emb": normal((cfg.max_seq_len, d), INIT_STD),
    }
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        p[b + "attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        p[b + "wq"] = normal((d, d), INIT_STD)
        p[b + "wk"] = normal((d, d), INIT_STD)
        p[b + "wv"] = normal((d, d), INIT_STD)
        p[b + "wo"] = normal((d, d), resid_std)
        p[b + "mlp_norm"] = Tensor(np.ones(d), requires_grad=True)
        p[b + "w1"] = normal((d, f), INIT_STD)
        p[b + "w2"] = normal((f, d), resid_std)
    p["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    head = np.zeros((d, cfg.vocab_size)) if zero_head else rng.normal(0.0, INIT_STD, size=(d, cfg.vocab_size))
    p["head"] = Tensor(head, requires_grad=True)
    return p


def pad_batch(seqs: Sequence[np.ndarray], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class KVCache:
    """Per-layer keys/values for one sequence, shaped ``[heads, t, head_dim]``."""

    def __init__(self, n_layers: int) -> None:
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers
        self.length = 0


class Specialist:
    def __init__(self, config: LmConfig, params: dict[str, Tensor], domain: str, template: PromptTemplate | None = None) -> None:
        self.config = config
        self.params = params
        self.domain = domain
        self.template = template if template is not None else TEMPLATES[domain]

    @classmethod
    def create(cls, config: LmConfig, domain: str, seed: int, template: PromptTemplate | None = None, zero_head: bool = True) -> "Specialist":
        return cls(config, init_params(config, seed, zero_head), domain, template)

    def __repr__(self) -> str:
        return f"Specialist(domain={self.domain!r}, d_model={self.config.d_model}, layers={self.config.n_layers})"

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def copy(self) -> "Specialist":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Specialist(self.config, params, self.domain, self.template)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def _validate(self, tokens: np.ndarray) -> None:
        if tokens.shape[-1] > self.config.max_seq_len:
            raise LengthError(f"sequence length {tokens.shape[-1]} > max_seq_len {self.config.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabError(f"token id outside [0, {self.config.vocab_size})")

    # ------------------------------------------------------------ differentiable path

    def hidden_states(self, tokens) -> Tensor:
        """Final-norm hidden states ``[B, T, d_model]`` for int tokens ``[B, T]``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        self._validate(tokens)
        cfg, p = self.config, self.params
        bsz, t = tokens.shape
        h_, dh = cfg.n_heads, cfg.head_dim
        x = nc.add(nc.embedding_lookup(p["tok_emb"], tokens), _rows(p["pos_emb"], t))
        for i in range(cfg.n_layers):
            b = f"blocks.{i}."
            a = nc.rmsnorm(x, p[b + "attn_norm"], NORM_EPS)

            def heads(w):
                return nc.transpose(nc.reshape(nc.matmul(a, w), (bsz, t, h_, dh)), (0, 2, 1, 3))

            att = nc.causal_self_attention(heads(p[b + "wq"]), heads(p[b + "wk"]), heads(p[b + "wv"]))
            att = nc.reshape(nc.transpose(att, (0, 2, 1, 3)), (bsz, t, cfg.d_model))
            x = nc.add(x, nc.matmul(att, p[b + "wo"]))
            m = nc.rmsnorm(x, p[b + "mlp_norm"], NORM_EPS)
            x = nc.add(x, nc.matmul(nc.relu(nc.matmul(m, p[b + "w1"])), p[b + "w2"]))
        return nc.rmsnorm(x, p["final_norm"], NORM_EPS)

    def head(self, hidden: Tensor) -> Tensor:
        return nc.matmul(hidden, self.params["head"])

    def forward(self, tokens) -> SpecialistOutput:
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        h = self.hidden_states(tokens)
        if single:
            h = nc.reshape(h, h.shape[1:])
        return SpecialistOutput(h, self.head(h))

    # ------------------------------------------------------------ cached inference path

    def new_cache(self) -> KVCache:
        return KVCache(self.config.n_layers)

    def extend(self, cache: KVCache, ids) -> tuple[np.ndarray, np.ndarray]:
        """Feed ``ids`` after the cached prefix; return ``(hidden, logits)`` for the new positions."""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        cfg, p = self.config, {k: v.data for k, v in self.params.items()}
        t0, n = cache.length, len(ids)
        if t0 + n > cfg.max_seq_len:
            raise LengthError(f"context {t0 + n} > max_seq_len {cfg.max_seq_len}")
        self._validate(ids)
        h_, dh = cfg.n_heads, cfg.head_dim
        c = 1.0 / np.sqrt(dh)
        allowed = np.arange(t0 + n)[None, :] <= (t0 + np.arange(n))[:, None]
        x = p["tok_emb"][ids] + p["pos_emb"][t0 : t0 + n]
        for i in range(cfg.n_layers):
            b = f"blocks.{i}."
            a = _rms_np(x, p[b + "attn_norm"])
            q, k, v = ((a @ p[b + w]).reshape(n, h_, dh).transpose(1, 0, 2) for w in ("wq", "wk", "wv"))
            if cache.k[i] is not None:
                k = np.concatenate([cache.k[i], k], axis=1)
                v = np.concatenate([cache.v[i], v], axis=1)
            cache.k[i], cache.v[i] = k, v
            s = np.where(allowed, (q @ k.transpose(0, 2, 1)) * c, nc.MASK_VALUE)
            att = (nc._softmax_np(s, -1) @ v).transpose(1, 0, 2).reshape(n, cfg.d_model)
            x = x + att @ p[b + "wo"]
            m = _rms_np(x, p[b + "mlp_norm"])
            x = x + np.maximum(m @ p[b + "w1"], 0.0) @ p[b + "w2"]
        cache.length = t0 + n
        hidden = _rms_np(x, p["final_norm"])
        return hidden, hidden @ p["head"]

    # ------------------------------------------------------------ evaluation

    def response_nll(self, examples: Sequence[TrainingExample], batch_size: int = 32) -> tuple[float, int]:
        """Summed response-token NLL under this specialist's own template, and the token count."""
        total, count = 0.0, 0
        with nc.no_grad():
            for lo in range(0, len(examples), batch_size):
                chunk = [wrap_example(ex, [self.template], max_seq_len=self.config.max_seq_len) for ex in examples[lo : lo + batch_size]]
                tokens, targets, mask = _lm_batch([w.tokens[0] for w in chunk], [(w.starts[0], w.length) for w in chunk])
                logits = self.head(self.hidden_states(tokens)).data
                logp = nc._log_softmax_np(logits, -1)
                picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
                total -= float(picked[mask].sum())
                count += int(mask.sum())
        return total, count

    # ------------------------------------------------------------ persistence

    def save(self, path, meta: dict | None = None, optimizer: OptimizerState | None = None) -> None:
        arrays = {f"params.{k}": v.data for k, v in self.params.items()}
        info = {"domain": self.domain, "template": asdict(self.template), **(meta or {})}
        if optimizer is not None:
            arrays.update({f"optim.m.{k}": v for k, v in optimizer.m.items()})
            arrays.update({f"optim.v.{k}": v for k, v in optimizer.v.items()})
            info["optim_step"] = optimizer.step
        save_arrays(path, "specialist", asdict(self.config), arrays, info)

    @classmethod
    def load(cls, path) -> "Specialist":
        return load_specialist(path)[0]


def load_specialist(path) -> tuple[Specialist, dict, OptimizerState | None]:
    header, arrays = load_arrays(path)
    if header["kind"] != "specialist":
        raise CheckpointError(f"{path}: expected a specialist checkpoint, found {header['kind']!r}")
    return _specialist_from(header["config"], header["meta"], arrays, "params.") + (_optimizer_from(header["meta"], arrays, "optim."),)


def _specialist_from(config: dict, meta: dict, arrays: dict, prefix: str) -> tuple[Specialist, dict]:
    cfg = LmConfig(**config)
    params = {k[len(prefix):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(prefix)}
    template = PromptTemplate(**meta["template"])
    return Specialist(cfg, params, meta["domain"], template), meta


def _optimizer_from(meta: dict, arrays: dict, prefix: str) -> OptimizerState | None:
    if "optim_step" not in meta:
        return None
    st = OptimizerState(step=int(meta["optim_step"]))
    for k, v in arrays.items():
        if k.startswith(prefix + "m."):
            st.m[k[len(prefix) + 2:]] = v.copy()
        elif k.startswith(prefix + "v."):
            st.v[k[len(prefix) + 2:]] = v.copy()
    return st


def _rows(table: Tensor, t: int) -> Tensor:
    return nc.embedding_lookup(table, np.arange(t))


def _rms_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS) * w


def _lm_batch(seqs: Sequence[np.ndarray], spans: Sequence[tuple[int, int]] | None = None):
    """Inputs, next-token targets and loss mask for a padded batch.

    With ``spans`` only the positions predicting ``seq[start:start+length]`` count;
    otherwise every real next token counts.
    """
    tokens = pad_batch(seqs)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros(tokens.shape, dtype=bool)
    for i, s in enumerate(seqs):
        if spans is None:
            mask[i, : len(s) - 1] = True
        else:
            st, ln = spans[i]
            mask[i, st - 1 : st - 1 + ln] = True
    return tokens, targets, mask


def forward(spec: Specialist, tokens) -> SpecialistOutput:
    return spec.forward(tokens)


def perplexity(model, examples: Sequence[TrainingExample]) -> float:
    """exp of the mean response-token cross-entropy; works for specialists and fused models."""
    if not examples:
        raise ValueError("perplexity of an empty split")
    total, count = model.response_nll(examples)
    return math.exp(total / count)


def cross_entropy_on(model, examples: Sequence[TrainingExample]) -> float:
    total, count = model.response_nll(examples)
    return total / count


@dataclass
class PretrainState:
    specialist: Specialist
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    losses: list[float] = field(default_factory=list)


def pretrain_specialist(
    corpus: DomainCorpus,
    cfg: LmConfig,
    train_cfg: PretrainConfig,
    seed: int,
    *,
    resume: PretrainState | None = None,
    stop_after: int | None = None,
    on_step=None,
) -> Specialist:
    """Next-token training on one domain's rendered examples (all non-pad positions).

    ``resume``/``stop_after`` allow interrupting and continuing a run; the batch
    sequence is a pure function of ``seed`` so a resumed run is bit-identical.
    """
    return pretrain_run(corpus, cfg, train_cfg, seed, resume=resume, stop_after=stop_after, on_step=on_step).specialist


def pretrain_run(corpus, cfg, train_cfg, seed, *, resume=None, stop_after=None, on_step=None) -> PretrainState:
    if not corpus.train:
        raise ValueError(f"{corpus.domain}: empty training corpus")
    state = resume or PretrainState(Specialist.create(cfg, corpus.domain, seed))
    spec = state.specialist
    spec.set_trainable(True)
    template = spec.template
    rows = [wrap_example(ex, [template], max_seq_len=cfg.max_seq_len).tokens[0] for ex in corpus.train]
    rng = np.random.default_rng([seed, 1])
    batches = [rng.integers(0, len(rows), size=train_cfg.batch_size) for _ in range(train_cfg.steps)]
    end = train_cfg.steps if stop_after is None else min(train_cfg.steps, stop_after)
    for step in range(state.optimizer.step, end):
        tokens, targets, mask = _lm_batch([rows[j] for j in batches[step]])
        try:
            loss = nc.cross_entropy(spec.head(spec.hidden_states(tokens)), targets, mask)
        except nc.NumericError as e:
            raise TrainingError(step, f"pretrain[{corpus.domain}]", float("nan")) from e
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(step, f"pretrain[{corpus.domain}]", value)
        loss.backward()
        grads = {k: p.grad for k, p in spec.params.items() if p.grad is not None}
        clip_grad_norm(grads, train_cfg.grad_clip)
        lr = _warmup_cosine(step, train_cfg)
        adamw_step(spec.params, grads, state.optimizer, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps, train_cfg.weight_decay)
        for p in spec.params.values():
            p.grad = None
        state.losses.append(value)
        if on_step is not None:
            on_step(step, value, lr)
        if step % 100 == 0:
            log.info("pretrain[%s] step %d loss %.4f lr %.2e", corpus.domain, step, value, lr)
    return state


def _warmup_cosine(step: int, c: PretrainConfig) -> float:
    if step < c.warmup:
        return c.lr * (step + 1) / c.warmup
    return cosine_lr(step - c.warmup, max(1, c.steps - c.warmup), c.lr)
