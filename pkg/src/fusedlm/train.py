"""Two-stage fused training.

Stage 1 freezes every specialist and warms up the gate alone. Stage 2 unfreezes
everything and fine-tunes jointly. Both stages draw class-balanced batches and
minimize the fused cross-entropy on response tokens; each stage runs its own
cosine schedule and starts from a fresh AdamW state.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numcore as nc
from .data import DomainCorpus, TrainingExample, balanced_batches, natural_batches
from .errors import TrainingError
from .fuser import FusedModel
from .optim import OptimizerState, adamw_step, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

SAMPLERS = ("balanced", "natural")


@dataclass(frozen=True)
class TrainConfig:
    n1_steps: int = 200
    n2_steps: int = 1000
    lr1: float = 3e-4
    lr2: float = 3e-4
    per_domain_batch: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    sampler: str = "balanced"

    def __post_init__(self) -> None:
        if self.n1_steps < 0 or self.n2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.lr1 < 0 or self.lr2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.per_domain_batch <= 0:
            raise ValueError("per_domain_batch must be positive")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")


# Values reported for the 13B-scale runs; kept for reference, not used by default.
PAPER_SCALE = TrainConfig(n1_steps=400, lr1=2e-5, lr2=2e-5, per_domain_batch=32)


@dataclass
class StepRecord:
    stage: int
    step: int
    loss: float
    lr: float
    domain_loss: dict[str, float]
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: FusedModel
    records: list[StepRecord] = field(default_factory=list)
    checksums_before_stage1: list[str] = field(default_factory=list)
    checksums_after_stage1: list[str] = field(default_factory=list)

    def losses(self, stage: int) -> list[float]:
        return [r.loss for r in self.records if r.stage == stage]


class MetricsLog:
    """Append-only JSON-lines log of step records and events."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def __call__(self, rec: StepRecord) -> None:
        self.write({"event": "step", **asdict(rec)})


def batch_stream(corpora: Sequence[DomainCorpus], cfg: TrainConfig, stage: int) -> Iterator[list[TrainingExample]]:
    seed = [cfg.seed, stage]
    if cfg.sampler == "balanced":
        return balanced_batches(corpora, cfg.per_domain_batch, seed)
    return natural_batches(corpora, cfg.per_domain_batch * len(corpora), seed)


def _run_stage(
    model: FusedModel,
    corpora: Sequence[DomainCorpus],
    cfg: TrainConfig,
    stage: int,
    on_step: Callable[[StepRecord], None] | None,
    on_checkpoint: Callable[[int, FusedModel], None] | None,
    checkpoint_every: int | None,
) -> list[StepRecord]:
    steps, base_lr = (cfg.n1_steps, cfg.lr1) if stage == 1 else (cfg.n2_steps, cfg.lr2)
    if steps == 0:
        return []
    model.set_specialists_trainable(stage == 2)
    params = model.named_parameters()
    for p in model.gate.params.values():
        p.requires_grad = True
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    state = OptimizerState()
    records = []
    batches = batch_stream(corpora, cfg, stage)
    for step in range(steps):
        batch = next(batches)
        try:
            out = model.forward_batch(batch)
            loss = nc.cross_entropy(out.fused_logits, out.targets)
        except nc.NumericError as e:
            raise TrainingError(step, f"stage{stage}", float("nan")) from e
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(step, f"stage{stage}", value)
        loss.backward()
        grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
        norm = clip_grad_norm(grads, cfg.grad_clip)
        lr = cosine_lr(step, steps, base_lr)
        adamw_step(trainable, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        for p in trainable.values():
            p.grad = None
        rec = StepRecord(stage, step, value, lr, _domain_losses(out, batch), norm)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if step % 50 == 0 or step == steps - 1:
            log.info("stage%d step %d/%d loss %.4f lr %.2e", stage, step, steps, value, lr)
        if on_checkpoint is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            on_checkpoint(step + 1, model)
    return records


def _domain_losses(out, batch: Sequence[TrainingExample]) -> dict[str, float]:
    logp = nc._log_softmax_np(out.fused_logits.data, -1)
    nll = -logp[np.arange(len(out.targets)), out.targets]
    sums: dict[str, list[float]] = {}
    for b, ex in enumerate(batch):
        rows = out.rows(b)
        acc = sums.setdefault(ex.domain, [0.0, 0])
        acc[0] += float(nll[rows].sum())
        acc[1] += rows.stop - rows.start
    return {d: s / n for d, (s, n) in sums.items()}


def train_stage1(model: FusedModel, corpora: Sequence[DomainCorpus], cfg: TrainConfig, on_step=None, on_checkpoint=None, checkpoint_every=None) -> FusedModel:
    """Gate-only warm-up; specialist parameters are frozen and never get gradient buffers."""
    _run_stage(model, corpora, cfg, 1, on_step, on_checkpoint, checkpoint_every)
    return model


def train_stage2(model: FusedModel, corpora: Sequence[DomainCorpus], cfg: TrainConfig, on_step=None, on_checkpoint=None, checkpoint_every=None) -> FusedModel:
    """Joint fine-tuning of the gate and every specialist."""
    _run_stage(model, corpora, cfg, 2, on_step, on_checkpoint, checkpoint_every)
    return model


def train_two_stage(
    model: FusedModel,
    corpora: Sequence[DomainCorpus],
    cfg: TrainConfig,
    metrics: MetricsLog | None = None,
    on_checkpoint: Callable[[int, int, FusedModel], None] | None = None,
    checkpoint_every: int | None = None,
) -> TrainResult:
    result = TrainResult(model)

    def on_step(rec: StepRecord) -> None:
        result.records.append(rec)
        if metrics is not None:
            metrics(rec)

    def ckpt(stage):
        if on_checkpoint is None:
            return None
        return lambda step, m: on_checkpoint(stage, step, m)

    result.checksums_before_stage1 = model.specialist_checksums()
    if metrics is not None:
        metrics.write({"event": "stage_start", "stage": 1, "specialist_checksums": result.checksums_before_stage1})
    _run_stage(model, corpora, cfg, 1, on_step, ckpt(1), checkpoint_every)
    result.checksums_after_stage1 = model.specialist_checksums()
    if metrics is not None:
        metrics.write({
            "event": "stage_boundary",
            "step": cfg.n1_steps,
            "specialist_checksums": result.checksums_after_stage1,
            "specialists_unchanged": result.checksums_after_stage1 == result.checksums_before_stage1,
        })
    _run_stage(model, corpora, cfg, 2, on_step, ckpt(2), checkpoint_every)
    model.set_specialists_trainable(True)
    if metrics is not None:
        metrics.write({"event": "done", "steps": cfg.n1_steps + cfg.n2_steps})
    return result
