"""S specialists plus one shared gate, fused on response positions only.

Each example is rendered through every specialist's own template. Prompt lengths
differ between renderings, so only the response span lines up across
specialists; that span is where the gate weighs the hidden states and the
logits are mixed. Prompt positions are never fused and never enter the loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .checkpoint import load_arrays, save_arrays
from .data import PromptTemplate, TrainingExample, WrappedExample, wrap_example
from .errors import AlignmentError, CheckpointError
from .gate import FixedGate, GateNetwork, fuse_logits
from .lm import LmConfig, OptimizerState, Specialist, _optimizer_from, _specialist_from, pad_batch
from .numcore import Tensor


@dataclass
class FusedOutput:
    """Fusion results for the response rows of one or more examples.

    ``offsets[b]:offsets[b+1]`` selects example b's rows. Row r predicts
    ``targets[r]``.
    """

    fused_logits: Tensor
    weights: Tensor
    targets: np.ndarray
    offsets: np.ndarray
    per_specialist_logits: list[Tensor] | None = None
    full_logits: list[Tensor] | None = None

    def rows(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))


class FusedModel:
    def __init__(self, specialists: Sequence[Specialist], gate: GateNetwork | FixedGate) -> None:
        if len(specialists) < 1:
            raise ValueError("a fused model needs at least one specialist")
        c0 = specialists[0].config
        for s in specialists[1:]:
            if (s.config.vocab_size, s.config.d_model, s.config.max_seq_len) != (c0.vocab_size, c0.d_model, c0.max_seq_len):
                raise ValueError("specialists must share vocab_size, d_model and max_seq_len")
        if isinstance(gate, GateNetwork) and gate.d_model != c0.d_model:
            raise ValueError(f"gate width {gate.d_model} != specialist d_model {c0.d_model}")
        self.specialists = list(specialists)
        self.gate = gate

    @classmethod
    def create(cls, specialists: Sequence[Specialist], seed: int = 0, d_gate: int | None = None) -> "FusedModel":
        return cls(specialists, GateNetwork.create(specialists[0].config.d_model, d_gate, seed))

    def __repr__(self) -> str:
        return f"FusedModel(order={self.order}, gate={type(self.gate).__name__})"

    @property
    def config(self) -> LmConfig:
        return self.specialists[0].config

    @property
    def order(self) -> list[str]:
        return [s.domain for s in self.specialists]

    @property
    def templates(self) -> list[PromptTemplate]:
        return [s.template for s in self.specialists]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"gate.{k}": v for k, v in self.gate.params.items()}
        for i, s in enumerate(self.specialists):
            out.update({f"specialists.{i}.{k}": v for k, v in s.params.items()})
        return out

    def set_specialists_trainable(self, flag: bool) -> None:
        for s in self.specialists:
            s.set_trainable(flag)

    def with_gate(self, gate) -> "FusedModel":
        return FusedModel(self.specialists, gate)

    def copy(self) -> "FusedModel":
        return FusedModel([s.copy() for s in self.specialists], self.gate.copy())

    def specialist_checksums(self) -> list[str]:
        return [s.checksum() for s in self.specialists]

    def wrap(self, ex: TrainingExample) -> WrappedExample:
        return wrap_example(ex, self.templates, max_seq_len=self.config.max_seq_len)

    # ------------------------------------------------------------ forward

    def forward_batch(self, batch: Sequence[TrainingExample | WrappedExample], retain: bool = False, full_logits: bool = False) -> FusedOutput:
        wrapped = [w if isinstance(w, WrappedExample) else self.wrap(w) for w in batch]
        n_spec = len(self.specialists)
        for w in wrapped:
            if len(w.tokens) != n_spec:
                raise AlignmentError(f"example carries {len(w.tokens)} renderings for {n_spec} specialists")
            w.check_alignment()
        lengths = np.array([w.length for w in wrapped])
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        rows_b = np.repeat(np.arange(len(wrapped)), lengths)
        targets = np.concatenate([w.response_ids for w in wrapped])

        hiddens, logits, full = [], [], []
        for s, spec in enumerate(self.specialists):
            tokens = pad_batch([w.tokens[s] for w in wrapped])
            # row predicting response token j sits one position earlier
            rows_t = np.concatenate([np.arange(w.starts[s] - 1, w.starts[s] - 1 + w.length) for w in wrapped])
            h_all = spec.hidden_states(tokens)
            h = nc.gather_rows(h_all, rows_b, rows_t)
            if full_logits:
                lf = spec.head(h_all).retain_grad()
                full.append(lf)
                logits.append(nc.gather_rows(lf, rows_b, rows_t))
            else:
                logits.append(spec.head(h))
            hiddens.append(h)

        if n_spec == 1:
            weights = Tensor(np.ones((len(targets), 1)))
            fused = logits[0]
        else:
            weights = self.gate.weights(hiddens)
            fused = fuse_logits(weights, logits)
        return FusedOutput(fused, weights, targets, offsets, logits if retain else None, full if full_logits else None)

    def loss_batch(self, batch: Sequence[TrainingExample | WrappedExample]) -> Tensor:
        out = self.forward_batch(batch)
        if len(out.targets) == 0:
            raise nc.EmptyLossError("empty response span")
        return nc.cross_entropy(out.fused_logits, out.targets)

    def response_nll(self, examples: Sequence[TrainingExample], batch_size: int = 32) -> tuple[float, int]:
        total, count = 0.0, 0
        with nc.no_grad():
            for lo in range(0, len(examples), batch_size):
                out = self.forward_batch(examples[lo : lo + batch_size])
                logp = nc._log_softmax_np(out.fused_logits.data, -1)
                total -= float(logp[np.arange(len(out.targets)), out.targets].sum())
                count += len(out.targets)
        return total, count

    def per_domain_nll(self, examples: Sequence[TrainingExample], batch_size: int = 32) -> dict[str, tuple[float, int]]:
        res: dict[str, tuple[float, int]] = {}
        for d in dict.fromkeys(ex.domain for ex in examples):
            res[d] = self.response_nll([ex for ex in examples if ex.domain == d], batch_size)
        return res

    # ------------------------------------------------------------ persistence

    def save(self, path, meta: dict | None = None, optimizer: OptimizerState | None = None) -> None:
        if not isinstance(self.gate, GateNetwork):
            raise CheckpointError("only models with a trainable gate can be saved")
        arrays = {k: v.data for k, v in self.named_parameters().items()}
        info = {
            "order": self.order,
            "templates": [asdict(t) for t in self.templates],
            "d_gate": self.gate.w1.shape[1],
            **(meta or {}),
        }
        if optimizer is not None:
            arrays.update({f"optim.m.{k}": v for k, v in optimizer.m.items()})
            arrays.update({f"optim.v.{k}": v for k, v in optimizer.v.items()})
            info["optim_step"] = optimizer.step
        save_arrays(path, "fused", asdict(self.config), arrays, info)

    @classmethod
    def load(cls, path) -> "FusedModel":
        return load_fused(path)[0]


def load_fused(path) -> tuple[FusedModel, dict, OptimizerState | None]:
    header, arrays = load_arrays(path)
    if header["kind"] != "fused":
        raise CheckpointError(f"{path}: expected a fused checkpoint, found {header['kind']!r}")
    meta = header["meta"]
    specs = []
    for i, (dom, tmpl) in enumerate(zip(meta["order"], meta["templates"])):
        spec, _ = _specialist_from(header["config"], {"domain": dom, "template": tmpl}, arrays, f"specialists.{i}.")
        specs.append(spec)
    gate = GateNetwork(*(Tensor(arrays[f"gate.{k}"], requires_grad=True) for k in ("w1", "b1", "w2", "b2")))
    return FusedModel(specs, gate), meta, _optimizer_from(meta, arrays, "optim.")


def fused_forward(model: FusedModel, ex: TrainingExample | WrappedExample, retain: bool = False) -> FusedOutput:
    return model.forward_batch([ex], retain=retain)


def fused_loss(model: FusedModel, ex: TrainingExample | WrappedExample) -> Tensor:
    return model.loss_batch([ex])
