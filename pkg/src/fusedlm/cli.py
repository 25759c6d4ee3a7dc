"""``fusedlm`` command-line entry point.

Subcommands: prepare-data, train-specialist, train-fused, generate, analyze,
eval, experiment. Each reads a flat JSON config (``--config``) with flag
overrides, prints the resolved configuration and its hash, then runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig, load_run_config
from .data import DOMAINS, load_corpora, synth_corpus, write_corpus
from .errors import (
    AlignmentError,
    AnalysisError,
    CheckpointError,
    ConfigError,
    DomainError,
    EngineFailure,
    LengthError,
    SamplerError,
    TrainingError,
    VocabError,
)
from .fuser import FusedModel, load_fused
from .infer import EngineHandle, orchestrate
from .lm import PretrainState, Specialist, cross_entropy_on, load_specialist, perplexity, pretrain_run
from .tokenizer import DEFAULT_TOKENIZER
from .train import MetricsLog, train_two_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5
LOG_ENV = "FUSEDLM_LOG"

log = logging.getLogger("fusedlm")


class DataMissing(Exception):
    pass


def _paths(cfg: RunConfig) -> tuple[Path, Path]:
    return Path(cfg.data_dir), Path(cfg.out_dir)


def _validate_paths(cfg: RunConfig) -> None:
    for name in ("data_dir", "out_dir"):
        p = Path(getattr(cfg, name))
        if p.exists() and not p.is_dir():
            raise ConfigError(f"{name}={p} exists and is not a directory")
        parent = next((q for q in p.absolute().parents if q.exists()), None)
        if parent is None or not os.access(parent if not p.exists() else p, os.W_OK):
            raise ConfigError(f"{name}={p} is not writable")


def _announce(cmd: str, cfg: RunConfig) -> None:
    print(f"[{cmd}] seed={cfg.seed} config_hash={cfg.config_hash()}")
    print(json.dumps(cfg.to_dict(), sort_keys=True))
    sys.stdout.flush()


def _require_data(cfg: RunConfig) -> None:
    if not (Path(cfg.data_dir) / "manifest.json").is_file():
        raise DataMissing(f"no corpus manifest in {cfg.data_dir}; run prepare-data first")


def _specialist_path(out: Path, domain: str) -> Path:
    return out / f"specialist_{domain}.ckpt"


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"cannot create {path}: {e}") from e


# ---------------------------------------------------------------- commands


def cmd_prepare_data(cfg: RunConfig, force: bool = False) -> dict:
    data_dir, _ = _paths(cfg)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass --force to overwrite")
    _ensure_dir(data_dir)
    manifest = {"seed": cfg.seed, "config_hash": cfg.config_hash(), "domains": {}, "counts": {}}
    for d in DOMAINS:
        corpus = synth_corpus(d, cfg.train_size, cfg.seed, cfg.held_out_size)
        manifest["domains"][d] = write_corpus(corpus, data_dir / f"{d}.jsonl")
        manifest["counts"][d] = {"train": len(corpus.train), "held_out": len(corpus.held_out)}
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(json.dumps(manifest["counts"], sort_keys=True))
    return manifest


def cmd_train_specialist(cfg: RunConfig, domain: str, resume: bool = False, stop_after: int | None = None) -> dict:
    if domain not in DOMAINS:
        raise DomainError(f"unknown domain {domain!r}")
    _require_data(cfg)
    _, out = _paths(cfg)
    _ensure_dir(out)
    corpora = load_corpora(cfg.data_dir)
    corpus = corpora[DOMAINS.index(domain)]
    ckpt = _specialist_path(out, domain)
    seed = cfg.seed * 1000 + DOMAINS.index(domain)
    state = None
    if resume and ckpt.exists():
        spec, meta, opt = load_specialist(ckpt)
        if opt is None:
            raise CheckpointError(f"{ckpt} holds no optimizer state to resume from")
        state = PretrainState(spec, opt)
        print(f"resuming {domain} from step {opt.step}")
    metrics = MetricsLog(out / f"metrics_specialist_{domain}.jsonl")
    pcfg = cfg.pretrain()
    every = cfg.checkpoint_every

    def on_step(step, loss, lr):
        metrics.write({"event": "step", "stage": "pretrain", "domain": domain, "step": step, "loss": loss, "lr": lr, "config_hash": cfg.config_hash()})
        if every and (step + 1) % every == 0 and step + 1 < pcfg.steps:
            cur.specialist.save(ckpt, {"config_hash": cfg.config_hash(), "seed": seed}, cur.optimizer)

    cur = state or PretrainState(Specialist.create(cfg.lm(), domain, seed))
    cur = pretrain_run(corpus, cfg.lm(), pcfg, seed, resume=cur, stop_after=stop_after, on_step=on_step)
    done = cur.optimizer.step >= pcfg.steps
    cur.specialist.save(ckpt, {"config_hash": cfg.config_hash(), "seed": seed, "complete": done}, cur.optimizer)
    table = {c.domain: cross_entropy_on(cur.specialist, c.held_out) for c in corpora}
    metrics.write({"event": "held_out_ce", "domain": domain, "ce": table, "step": cur.optimizer.step, "config_hash": cfg.config_hash()})
    print("held-out cross-entropy (" + domain + " specialist):")
    for d, v in table.items():
        print(f"  {d}\t{v:.6f}")
    return table


def _load_specialists(cfg: RunConfig) -> list[Specialist]:
    _, out = _paths(cfg)
    specs = []
    for d in DOMAINS:
        p = _specialist_path(out, d)
        if not p.is_file():
            raise DataMissing(f"missing specialist checkpoint {p}; run train-specialist --domain {d}")
        specs.append(Specialist.load(p))
    return specs


def cmd_train_fused(cfg: RunConfig) -> dict:
    _require_data(cfg)
    _, out = _paths(cfg)
    specs = _load_specialists(cfg)
    corpora = load_corpora(cfg.data_dir)
    model = FusedModel.create(specs, seed=cfg.seed)
    metrics = MetricsLog(out / "metrics_fused.jsonl")
    metrics.write({"event": "config", "config": cfg.to_dict(), "config_hash": cfg.config_hash()})
    ckpt = out / "fused.ckpt"

    def save(stage, step, m):
        m.save(ckpt, {"config_hash": cfg.config_hash(), "stage": stage, "step": step})

    result = train_two_stage(model, corpora, cfg.train(), metrics, on_checkpoint=save, checkpoint_every=cfg.checkpoint_every)
    model.save(ckpt, {"config_hash": cfg.config_hash(), "stage": 2, "step": cfg.n2_steps, "complete": True})
    unchanged = result.checksums_before_stage1 == result.checksums_after_stage1
    print(f"stage boundary at step {cfg.n1_steps}; specialists unchanged through stage 1: {unchanged}")
    return {"unchanged": unchanged, "final_loss": result.records[-1].loss if result.records else None}


def _load_model(cfg: RunConfig) -> FusedModel:
    p = Path(cfg.out_dir) / "fused.ckpt"
    if not p.is_file():
        raise DataMissing(f"missing fused checkpoint {p}; run train-fused")
    return load_fused(p)[0]


def cmd_generate(cfg: RunConfig, prompt: str, trace_path: str | None = None, stream=None) -> str:
    stream = stream or sys.stdout
    model = _load_model(cfg)
    gcfg = cfg.generation()
    handles = [EngineHandle(s, prompt, f"{i}:{s.domain}") for i, s in enumerate(model.specialists)]
    records, pieces = [], []
    for rec in orchestrate(handles, model.gate, gcfg):
        records.append(rec)
        if rec.token != gcfg.stop_token:
            piece = DEFAULT_TOKENIZER.token_str(rec.token)
            pieces.append(piece)
            stream.write(piece)
            stream.flush()
    stream.write("\n")
    if trace_path:
        with open(trace_path, "w", encoding="utf-8") as f:
            for i, r in enumerate(records):
                f.write(json.dumps({"step": i, **r.to_dict(), "config_hash": cfg.config_hash()}) + "\n")
    return "".join(pieces)


def cmd_analyze(cfg: RunConfig) -> analysis.WeightMatrix:
    _require_data(cfg)
    model = _load_model(cfg)
    corpora = load_corpora(cfg.data_dir)
    out = Path(cfg.out_dir) / "analysis"
    _ensure_dir(out)
    records, next_id = [], 0
    for c in corpora:
        records += analysis.record_weights(model, c.held_out[: cfg.analysis_samples], first_id=next_id)
        next_id += len(c.held_out[: cfg.analysis_samples])
    matrix = analysis.average_weights(records, model.order, list(DOMAINS))
    (out / "weights.tsv").write_text(f"# config_hash={cfg.config_hash()}\n" + matrix.to_table(), encoding="utf-8")
    analysis.export_heatmap(records, out / "heatmap", model.order)
    for c in corpora:
        if c.held_out:
            (out / f"case_{c.domain}.txt").write_text(analysis.token_case(model, c.held_out[0]).format(), encoding="utf-8")
    print(matrix.to_table(digits=4), end="")
    print("diagonal dominance:", json.dumps(matrix.diagonal_dominance, sort_keys=True))
    return matrix


def cmd_eval(cfg: RunConfig) -> dict[str, dict[str, float]]:
    _require_data(cfg)
    model = _load_model(cfg)
    corpora = load_corpora(cfg.data_dir)
    rows: dict[str, dict[str, float]] = {}
    for s in model.specialists:
        rows[f"specialist:{s.domain}"] = {c.domain: perplexity(s, c.held_out) for c in corpora}
    rows["fused"] = {c.domain: perplexity(model, c.held_out) for c in corpora}
    lines = ["model\t" + "\t".join(DOMAINS)] + [k + "\t" + "\t".join(f"{v[d]:.6f}" for d in DOMAINS) for k, v in rows.items()]
    text = "\n".join(lines) + "\n"
    (Path(cfg.out_dir) / "eval.tsv").write_text(f"# config_hash={cfg.config_hash()}\n" + text, encoding="utf-8")
    print(text, end="")
    return rows


def cmd_experiment(cfg: RunConfig, report: str | None = None) -> dict:
    from .experiment import ExperimentConfig, run_experiment

    res = run_experiment(ExperimentConfig.from_run_config(cfg), workdir=Path(cfg.out_dir) / "experiment")
    text = json.dumps(res, indent=1, sort_keys=True, default=_jsonable)
    if report:
        Path(report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return res


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(type(x))


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_dir", help="output directory (checkpoints, logs)")
    common.add_argument("--data", dest="data_dir", help="corpus directory")

    p = argparse.ArgumentParser(prog="fusedlm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("prepare-data", parents=[common], help="write synthetic corpora and manifest")
    s.add_argument("--force", action="store_true")
    s = sub.add_parser("train-specialist", parents=[common], help="pre-train one domain specialist")
    s.add_argument("--domain", required=True)
    s.add_argument("--resume", action="store_true", help="continue from the domain's checkpoint")
    s.add_argument("--stop-after", type=int, help="stop after this many optimizer steps (checkpointed)")
    sub.add_parser("train-fused", parents=[common], help="two-stage fused training")
    s = sub.add_parser("generate", parents=[common], help="stream a fused generation")
    s.add_argument("--prompt", required=True)
    s.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--trace", help="write per-step JSON lines to this file")
    sub.add_parser("analyze", parents=[common], help="gate-weight analyses on held-out data")
    sub.add_parser("eval", parents=[common], help="held-out perplexity, specialists vs fused")
    s = sub.add_parser("experiment", parents=[common], help="run the full desk-scale experiment")
    s.add_argument("--report", help="write the JSON report here")
    return p


_OVERRIDE_KEYS = ("seed", "out_dir", "data_dir", "max_new_tokens", "temperature")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
        cfg = load_run_config(args.config, overrides)
        _announce(args.command, cfg)
        _validate_paths(cfg)
        if args.command == "prepare-data":
            cmd_prepare_data(cfg, args.force)
        elif args.command == "train-specialist":
            cmd_train_specialist(cfg, args.domain, args.resume, args.stop_after)
        elif args.command == "train-fused":
            cmd_train_fused(cfg)
        elif args.command == "generate":
            cmd_generate(cfg, args.prompt, args.trace)
        elif args.command == "analyze":
            cmd_analyze(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "experiment":
            cmd_experiment(cfg, args.report)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataMissing, DomainError, SamplerError, LengthError, VocabError, AlignmentError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, AnalysisError, EngineFailure) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
