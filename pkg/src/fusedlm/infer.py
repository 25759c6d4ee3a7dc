"""Fused autoregressive generation.

Two equivalent paths:

* :func:`generate` runs every specialist in-process and recomputes each context
  from scratch per token (or uses a KV cache when asked).
* :func:`orchestrate` drives one :class:`EngineHandle` per specialist through a
  step / fuse / resume protocol. An engine advances one position and pauses,
  handing back its last hidden state and logits instead of a token. The
  orchestrator fuses, selects one token, and resumes every engine with it.

Templates wrap only the prompt, so the selected token ids are appended verbatim
to every specialist's context.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numcore as nc
from .errors import EngineFailure, EngineStateError, LengthError
from .fuser import FusedModel
from .gate import FixedGate, GateNetwork
from .lm import Specialist
from .tokenizer import BOS, DEFAULT_TOKENIZER, EOS


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 64
    temperature: float = 0.0
    top_k: int | None = None
    stop_token: int = EOS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class TraceRecord:
    token: int
    weights: list[float]
    top_specialist: int

    def to_dict(self) -> dict:
        return {"token": self.token, "weights": self.weights, "top_specialist": self.top_specialist}


@dataclass
class GenerationResult:
    tokens: list[int]
    text: str
    trace: list[TraceRecord] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def tokens_per_sec(self) -> float:
        return len(self.trace) / self.seconds if self.seconds > 0 else float("inf")


def prompt_ids(template, prompt: str) -> list[int]:
    return [BOS] + DEFAULT_TOKENIZER.encode(template.prefix + prompt + template.infix)


def fuse_step(gate, hiddens: Sequence[np.ndarray], logits: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Fuse one position's specialist outputs; returns ``(fused_logits, weights)``."""
    if len(logits) == 1:
        return np.asarray(logits[0]), np.ones(1)
    w = gate.weights_np([np.asarray(h)[None, :] for h in hiddens])[0]
    stacked = np.stack(logits, axis=0)
    return np.sum(w[:, None] * stacked, axis=0), w


def select_token(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.temperature == 0:
        return int(np.argmax(logits))
    z = logits / cfg.temperature
    if cfg.top_k is not None and cfg.top_k < z.size:
        cut = np.partition(z, -cfg.top_k)[-cfg.top_k]
        z = np.where(z >= cut, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(z.size, p=p))


def _check_budget(contexts: Sequence[Sequence[int]], max_seq_len: int, cfg: GenerationConfig) -> None:
    longest = max(len(c) for c in contexts)
    if longest + cfg.max_new_tokens > max_seq_len:
        raise LengthError(f"prompt of {longest} tokens + {cfg.max_new_tokens} new tokens exceeds max_seq_len {max_seq_len}")


def generate_ids(model: FusedModel, prompt: str, cfg: GenerationConfig = GenerationConfig(), use_cache: bool = False) -> GenerationResult:
    """Monolithic fused decoding loop over all specialists."""
    contexts = [prompt_ids(s.template, prompt) for s in model.specialists]
    _check_budget(contexts, model.config.max_seq_len, cfg)
    rng = np.random.default_rng(cfg.seed)
    caches = [s.new_cache() for s in model.specialists] if use_cache else None
    pending = [list(c) for c in contexts]
    out: list[int] = []
    trace: list[TraceRecord] = []
    start = time.perf_counter()
    with nc.no_grad():
        for _ in range(cfg.max_new_tokens):
            hiddens, logits = [], []
            for i, spec in enumerate(model.specialists):
                if use_cache:
                    h, lg = spec.extend(caches[i], pending[i])
                    hiddens.append(h[-1])
                    logits.append(lg[-1])
                else:
                    h = spec.hidden_states(np.asarray(contexts[i])[None, :])
                    last = nc.Tensor(h.data[0, -1:])
                    hiddens.append(last.data[0])
                    logits.append(spec.head(last).data[0])
            fused, w = fuse_step(model.gate, hiddens, logits)
            tok = select_token(fused, cfg, rng)
            trace.append(TraceRecord(tok, [float(x) for x in w], int(np.argmax(w))))
            if tok == cfg.stop_token:
                break
            out.append(tok)
            for i in range(len(contexts)):
                contexts[i].append(tok)
                pending[i] = [tok]
    return GenerationResult(out, DEFAULT_TOKENIZER.decode(out), trace, time.perf_counter() - start)


def generate(model: FusedModel, prompt: str, cfg: GenerationConfig = GenerationConfig(), use_cache: bool = False) -> str:
    return generate_ids(model, prompt, cfg, use_cache).text


def generate_single(spec: Specialist, prompt: str, cfg: GenerationConfig = GenerationConfig(), use_cache: bool = False) -> str:
    """One specialist decoding alone under its own template."""
    return generate(FusedModel([spec], FixedGate([1.0])), prompt, cfg, use_cache)


# ---------------------------------------------------------------- engine protocol


@dataclass
class StepOutput:
    hidden: np.ndarray
    logits: np.ndarray


class EngineHandle:
    """A paused-generation session around one specialist.

    Life cycle: ``step()`` -> ``resume(token)`` -> ``step()`` ... A handle that
    has been resumed with the stop token, or closed, refuses further steps.
    """

    READY, PAUSED, FINISHED, FAILED = "ready", "paused", "finished", "failed"

    def __init__(self, specialist: Specialist, prompt: str, name: str | None = None, use_cache: bool = True, stop_token: int = EOS) -> None:
        self.specialist = specialist
        self.name = name or specialist.domain
        self.use_cache = use_cache
        self.stop_token = stop_token
        self.context = prompt_ids(specialist.template, prompt)
        self.prompt_len = len(self.context)
        self._pending = list(self.context)
        self._cache = specialist.new_cache() if use_cache else None
        self.state = self.READY

    @property
    def response_count(self) -> int:
        return len(self.context) - self.prompt_len

    def step(self) -> StepOutput:
        if self.state != self.READY:
            raise EngineStateError(f"engine {self.name!r}: step() while {self.state}")
        try:
            with nc.no_grad():
                if self.use_cache:
                    h, lg = self.specialist.extend(self._cache, self._pending)
                    out = StepOutput(h[-1], lg[-1])
                else:
                    h = self.specialist.hidden_states(np.asarray(self.context)[None, :])
                    last = nc.Tensor(h.data[0, -1:])
                    out = StepOutput(last.data[0], self.specialist.head(last).data[0])
        except Exception:
            self.state = self.FAILED
            raise
        self._pending = []
        self.state = self.PAUSED
        return out

    def resume(self, token: int) -> None:
        if self.state != self.PAUSED:
            raise EngineStateError(f"engine {self.name!r}: resume() while {self.state}")
        if token == self.stop_token:
            self.state = self.FINISHED
            return
        self.context.append(int(token))
        self._pending = [int(token)]
        self.state = self.READY

    def close(self) -> None:
        self.state = self.FINISHED

    def kill(self) -> None:
        """Simulate an engine crash: every later call fails."""
        self.state = self.FAILED


def orchestrate(
    handles: Sequence[EngineHandle],
    gate: GateNetwork | FixedGate | None,
    cfg: GenerationConfig = GenerationConfig(),
    parallel: bool = False,
) -> Iterator[TraceRecord]:
    """Lockstep loop: barrier on every engine's step, fuse, select, broadcast resume.

    Yields one :class:`TraceRecord` per selected token, including the final stop
    token if one is produced. Raises :class:`EngineFailure` naming the engine if
    any step fails.
    """
    if not handles:
        raise ValueError("orchestrate needs at least one engine")
    max_len = min(h.specialist.config.max_seq_len for h in handles)
    _check_budget([h.context for h in handles], max_len, cfg)
    rng = np.random.default_rng(cfg.seed)
    pool = ThreadPoolExecutor(max_workers=len(handles)) if parallel and len(handles) > 1 else None
    try:
        for _ in range(cfg.max_new_tokens):
            counts = {h.response_count for h in handles}
            if len(counts) != 1:
                raise EngineStateError(f"lockstep violated: response counts {[h.response_count for h in handles]}")
            outputs = []
            futures = [pool.submit(h.step) for h in handles] if pool else None
            for i, h in enumerate(handles):
                try:
                    outputs.append(futures[i].result() if futures else h.step())
                except Exception as e:
                    raise EngineFailure(i, h.name, e) from e
            fused, w = fuse_step(gate, [o.hidden for o in outputs], [o.logits for o in outputs])
            tok = select_token(fused, cfg, rng)
            for h in handles:
                h.resume(tok)
            yield TraceRecord(tok, [float(x) for x in w], int(np.argmax(w)))
            if tok == cfg.stop_token:
                return
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


def orchestrated_generate(model: FusedModel, prompt: str, cfg: GenerationConfig = GenerationConfig(), use_cache: bool = True, parallel: bool = False) -> GenerationResult:
    handles = [EngineHandle(s, prompt, f"{i}:{s.domain}", use_cache, cfg.stop_token) for i, s in enumerate(model.specialists)]
    start = time.perf_counter()
    trace = list(orchestrate(handles, model.gate, cfg, parallel))
    toks = [r.token for r in trace if r.token != cfg.stop_token]
    return GenerationResult(toks, DEFAULT_TOKENIZER.decode(toks), trace, time.perf_counter() - start)
