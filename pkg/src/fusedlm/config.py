"""Flat run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints

from .errors import ConfigError
from .infer import GenerationConfig
from .lm import LmConfig, PretrainConfig
from .tokenizer import DEFAULT_TOKENIZER
from .train import TrainConfig


@dataclass
class RunConfig:
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"
    seed: int = 0

    train_size: int = 2000
    held_out_size: int = 200

    vocab_size: int = DEFAULT_TOKENIZER.vocab_size
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    feedforward_mult: int = 4

    pretrain_steps: int = 800
    pretrain_batch_size: int = 16
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 0.01
    pretrain_warmup: int = 50

    n1_steps: int = 200
    n2_steps: int = 1000
    lr1: float = 3e-4
    lr2: float = 3e-4
    per_domain_batch: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    sampler: str = "balanced"
    checkpoint_every: int = 100

    max_new_tokens: int = 64
    temperature: float = 0.0
    top_k: int = 0  # 0 disables top-k

    analysis_samples: int = 100

    def lm(self) -> LmConfig:
        return LmConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len, self.feedforward_mult)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(
            steps=self.pretrain_steps,
            batch_size=self.pretrain_batch_size,
            lr=self.pretrain_lr,
            weight_decay=self.pretrain_weight_decay,
            warmup=self.pretrain_warmup,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            n1_steps=self.n1_steps, n2_steps=self.n2_steps, lr1=self.lr1, lr2=self.lr2,
            per_domain_batch=self.per_domain_batch, weight_decay=self.weight_decay,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, grad_clip=self.grad_clip,
            seed=self.seed, sampler=self.sampler,
        )

    def generation(self) -> GenerationConfig:
        return GenerationConfig(self.max_new_tokens, self.temperature, self.top_k or None, seed=self.seed)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def validate(self) -> None:
        try:
            self.lm()
            self.pretrain()
            self.train()
            self.generation()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.train_size <= 0 or self.held_out_size <= 0:
            raise ConfigError("train_size and held_out_size must be positive")


def _coerce(name: str, kind, value):
    if kind is bool or isinstance(value, bool):
        raise ConfigError(f"{name}: booleans are not accepted")
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind.__name__}") from None


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a flat JSON object, apply ``overrides`` on top, reject unknown keys."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a flat JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    hints = get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for k, v in raw.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{k}: nested values are not allowed")
        raw[k] = _coerce(k, hints[k], v)
    cfg = dataclasses.replace(RunConfig(), **raw)
    cfg.validate()
    return cfg
