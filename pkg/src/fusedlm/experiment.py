"""Desk-scale end-to-end experiment.

Pre-trains one specialist per synthetic domain, fuses them with the two-stage
protocol, and measures the quantities the acceptance checks rely on:

* the specialization gap (held-out CE matrix of every specialist on every domain),
* the average gate-weight matrix after fusion and its diagonal dominance,
* fused versus best-single-specialist held-out perplexity per domain,
* per-domain perplexity spread across stage-2 checkpoints with the balanced
  sampler and, from the same stage-1 gate, with natural mixing.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig
from .data import DOMAINS, check_math_response, synth_corpus
from .fuser import FusedModel
from .infer import GenerationConfig, generate
from .lm import LmConfig, PretrainConfig, cross_entropy_on, perplexity, pretrain_specialist
from .train import TrainConfig, _run_stage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    lm: LmConfig = LmConfig()
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig(n2_steps=400)  # the 1000-step default would overrun an hour on one core
    train_size: int = 2000
    held_out_size: int = 200
    seed: int = 0
    checkpoints: int = 5
    analysis_samples: int = 100
    math_prompts: int = 20

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "ExperimentConfig":
        return cls(cfg.lm(), cfg.pretrain(), cfg.train(), cfg.train_size, cfg.held_out_size, cfg.seed, analysis_samples=cfg.analysis_samples)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ppl_row(model, corpora) -> dict[str, float]:
    return {c.domain: perplexity(model, c.held_out) for c in corpora}


def _stage2_with_evals(model: FusedModel, corpora, cfg: TrainConfig, checkpoints: int) -> list[dict]:
    every = max(1, cfg.n2_steps // checkpoints)
    evals: list[dict] = []

    def on_ckpt(step, m):
        if len(evals) < checkpoints:
            evals.append({"step": step, "ppl": _ppl_row(m, corpora)})
            log.info("stage2[%s] checkpoint %d ppl %s", cfg.sampler, step, evals[-1]["ppl"])

    _run_stage(model, corpora, cfg, 2, None, on_ckpt, every)
    return evals


def _spread(evals: list[dict]) -> dict[str, float]:
    return {d: float(np.std([e["ppl"][d] for e in evals])) for d in evals[0]["ppl"]}


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), workdir: str | Path | None = None) -> dict:
    t0 = time.perf_counter()
    report: dict = {"config": cfg.to_dict(), "timings": {}}
    corpora = [synth_corpus(d, cfg.train_size, cfg.seed, cfg.held_out_size) for d in DOMAINS]

    specialists = []
    for i, c in enumerate(corpora):
        specialists.append(pretrain_specialist(c, cfg.lm, cfg.pretrain, seed=cfg.seed * 1000 + i))
    report["timings"]["pretrain_s"] = time.perf_counter() - t0
    ce = {s.domain: {c.domain: cross_entropy_on(s, c.held_out) for c in corpora} for s in specialists}
    report["specialist_ce"] = ce
    report["specialization_gap"] = {
        d: all(row[d] < row[o] for o in DOMAINS if o != d) for d, row in ce.items()
    }
    spec_ppl = {s.domain: _ppl_row(s, corpora) for s in specialists}
    report["specialist_ppl"] = spec_ppl
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        for s in specialists:
            s.save(Path(workdir) / f"specialist_{s.domain}.ckpt")

    model = FusedModel.create([s.copy() for s in specialists], seed=cfg.seed)
    before = model.specialist_checksums()
    _run_stage(model, corpora, cfg.train, 1, None, None, None)
    report["stage1_specialists_unchanged"] = before == model.specialist_checksums()
    stage1 = model.copy()
    report["timings"]["stage1_s"] = time.perf_counter() - t0

    balanced_cfg = dataclasses.replace(cfg.train, sampler="balanced")
    report["balanced_evals"] = _stage2_with_evals(model, corpora, balanced_cfg, cfg.checkpoints)
    report["timings"]["stage2_balanced_s"] = time.perf_counter() - t0

    records, next_id = [], 0
    for c in corpora:
        records += analysis.record_weights(model, c.held_out[: cfg.analysis_samples], first_id=next_id)
        next_id += len(c.held_out[: cfg.analysis_samples])
    matrix = analysis.average_weights(records, model.order, list(DOMAINS))
    report["weight_matrix"] = matrix.values.tolist()
    report["diagonal_dominance"] = matrix.diagonal_dominance
    report["math_token_classes"] = analysis.token_class_means(
        [r for r in records if r.domain == "math"], model.order.index("math")
    )

    fused_ppl = _ppl_row(model, corpora)
    best = {d: min(spec_ppl[s][d] for s in spec_ppl) for d in DOMAINS}
    report["fused_ppl"] = fused_ppl
    report["best_specialist_ppl"] = best
    report["fused_ratio"] = {d: fused_ppl[d] / best[d] for d in DOMAINS}

    math_ok = 0
    prompts = corpora[DOMAINS.index("math")].held_out[: cfg.math_prompts]
    for ex in prompts:
        out = generate(model, ex.prompt, GenerationConfig(max_new_tokens=48), use_cache=True)
        math_ok += check_math_response(ex.prompt, out)
    report["math_generation_accuracy"] = math_ok / max(1, len(prompts))
    if workdir is not None:
        model.save(Path(workdir) / "fused.ckpt")
        analysis.export_heatmap(records, Path(workdir) / "heatmap", model.order)

    natural_cfg = dataclasses.replace(cfg.train, sampler="natural")
    report["natural_evals"] = _stage2_with_evals(stage1, corpora, natural_cfg, cfg.checkpoints)
    report["timings"]["stage2_natural_s"] = time.perf_counter() - t0

    bal, nat = _spread(report["balanced_evals"]), _spread(report["natural_evals"])
    report["ppl_std"] = {"balanced": bal, "natural": nat}
    report["balanced_std_not_worse"] = {d: bal[d] <= nat[d] for d in DOMAINS}
    report["timings"]["total_s"] = time.perf_counter() - t0
    return report
