"""Gate-weight recording and the expertise analyses built on it.

Everything exported here (weight matrices, heatmap tables, token listings) is a
pure function of a list of :class:`TokenWeightRecord`, which in turn comes from
a teacher-forced pass over existing examples.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import TrainingExample
from .errors import AnalysisError
from .tokenizer import DEFAULT_TOKENIZER, SPECIALS, CharTokenizer


@dataclass(frozen=True)
class TokenWeightRecord:
    sample_id: int
    domain: str
    position: int  # index within the response span, EOS included
    token: int
    weights: tuple[float, ...]


def record_weights(model, examples: Sequence[TrainingExample], batch_size: int = 32, first_id: int = 0) -> list[TokenWeightRecord]:
    """One record per response-token position of every example (teacher forced)."""
    out: list[TokenWeightRecord] = []
    with nc.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            res = model.forward_batch(chunk)
            w = res.weights.data
            for b, ex in enumerate(chunk):
                rows = res.rows(b)
                for pos, r in enumerate(range(rows.start, rows.stop)):
                    out.append(TokenWeightRecord(first_id + lo + b, ex.domain, pos, int(res.targets[r]), tuple(float(x) for x in w[r])))
    return out


@dataclass
class WeightMatrix:
    """Rows are specialists, columns are data domains; entries are mean weights."""

    values: np.ndarray
    specialists: list[str]
    domains: list[str]
    counts: list[int]

    @property
    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)

    @property
    def diagonal_dominance(self) -> dict[str, bool]:
        """Per domain: does the same-named specialist hold the strict column maximum?"""
        flags = {}
        for j, d in enumerate(self.domains):
            if d not in self.specialists:
                flags[d] = False
                continue
            i = self.specialists.index(d)
            col = self.values[:, j]
            flags[d] = bool(all(col[i] > col[k] for k in range(len(col)) if k != i))
        return flags

    def to_table(self, digits: int | None = None) -> str:
        """Tab-separated table; full round-trip precision unless ``digits`` is given."""
        fmt = repr if digits is None else (lambda v: f"{v:.{digits}f}")
        lines = ["specialist\t" + "\t".join(self.domains)]
        for i, s in enumerate(self.specialists):
            lines.append(s + "\t" + "\t".join(fmt(float(v)) for v in self.values[i]))
        return "\n".join(lines) + "\n"


def read_weight_table(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    domains = lines[0].split("\t")[1:]
    names, rows = [], []
    for ln in lines[1:]:
        name, *vals = ln.split("\t")
        names.append(name)
        rows.append([float(v) for v in vals])
    return names, domains, np.array(rows)


def average_weights(records: Sequence[TokenWeightRecord], specialists: Sequence[str], domains: Sequence[str] | None = None) -> WeightMatrix:
    if domains is None:
        domains = list(dict.fromkeys(r.domain for r in records))
    s = len(specialists)
    values = np.zeros((s, len(domains)))
    counts = []
    for j, d in enumerate(domains):
        ws = [r.weights for r in records if r.domain == d]
        if not ws:
            raise AnalysisError(f"no records for domain {d!r}")
        arr = np.asarray(ws, dtype=float)
        if arr.shape[1] != s:
            raise AnalysisError(f"records carry {arr.shape[1]} weights for {s} specialists")
        values[:, j] = arr.mean(axis=0)
        counts.append(len(ws))
    return WeightMatrix(values, list(specialists), list(domains), counts)


def sample_means(records: Sequence[TokenWeightRecord]) -> list[tuple[int, str, int, np.ndarray]]:
    """``(sample_id, domain, n_tokens, mean_weights)`` per sample, in first-seen order."""
    groups: "OrderedDict[int, list[TokenWeightRecord]]" = OrderedDict()
    for r in records:
        groups.setdefault(r.sample_id, []).append(r)
    return [(sid, rs[0].domain, len(rs), np.mean([r.weights for r in rs], axis=0)) for sid, rs in groups.items()]


HEATMAP_COLUMNS = "sample_id, domain, n_tokens, then one mean-weight column per specialist"


def export_heatmap(records: Sequence[TokenWeightRecord], path: str | Path, specialists: Sequence[str]) -> tuple[Path, Path]:
    """Write ``<path>.tsv`` (canonical) and ``<path>.svg`` (S rows x N sample columns)."""
    if not records:
        raise AnalysisError("no records to export")
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".svg", ".tsv") else path
    tsv, svg = base.with_suffix(".tsv"), base.with_suffix(".svg")
    samples = sample_means(records)
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with tsv.open("w", encoding="utf-8", newline="\n") as f:
            f.write("sample_id\tdomain\tn_tokens\t" + "\t".join(f"w_{s}" for s in specialists) + "\n")
            for sid, dom, n, m in samples:
                f.write(f"{sid}\t{dom}\t{n}\t" + "\t".join(repr(float(x)) for x in m) + "\n")
        svg.write_text(_heatmap_svg(samples, specialists), encoding="utf-8")
    except OSError as e:
        raise AnalysisError(f"cannot write heatmap to {base}: {e}") from e
    return svg, tsv


def read_heatmap_table(path: str | Path) -> list[tuple[int, str, int, np.ndarray]]:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        parts = line.split("\t")
        rows.append((int(parts[0]), parts[1], int(parts[2]), np.array([float(x) for x in parts[3:]])))
    return rows


def _heatmap_svg(samples, specialists: Sequence[str]) -> str:
    cell_w, cell_h, left, top = 6, 24, 70, 30
    n, s = len(samples), len(specialists)
    width, height = left + n * cell_w + 10, top + s * cell_h + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for i, name in enumerate(specialists):
        parts.append(f'<text x="{left - 6}" y="{top + i * cell_h + cell_h * 0.65:.1f}" font-size="11" text-anchor="end">{name}</text>')
    prev_domain, start = None, 0
    for j, (_, dom, _, m) in enumerate(samples):
        for i in range(s):
            parts.append(
                f'<rect x="{left + j * cell_w}" y="{top + i * cell_h}" width="{cell_w}" height="{cell_h}" fill="{_shade(m[i])}"/>'
            )
        if dom != prev_domain:
            if prev_domain is not None:
                parts.append(_domain_label(prev_domain, left + start * cell_w, left + j * cell_w, top - 8))
            prev_domain, start = dom, j
    parts.append(_domain_label(prev_domain, left + start * cell_w, left + n * cell_w, top - 8))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _domain_label(domain: str, x0: float, x1: float, y: float) -> str:
    return f'<text x="{(x0 + x1) / 2:.1f}" y="{y}" font-size="11" text-anchor="middle">{domain}</text>'


def _shade(w: float) -> str:
    """Darker blue for larger weight; w is clipped to [0, 1]."""
    w = min(max(float(w), 0.0), 1.0)
    r = round(255 - 227 * w)
    g = round(255 - 175 * w)
    b = round(255 - 95 * w)
    return f"#{r:02x}{g:02x}{b:02x}"


@dataclass
class TokenCase:
    specialists: list[str]
    rows: list[tuple[int, str, tuple[float, ...]]]  # (position, token text, weights)

    def format(self) -> str:
        lines = ["pos\ttoken\t" + "\t".join(self.specialists)]
        for pos, text, w in self.rows:
            lines.append(f"{pos}\t{json.dumps(text)}\t" + "\t".join(f"{x:.4f}" for x in w))
        return "\n".join(lines) + "\n"


def token_case(model, sample: TrainingExample, tokenizer: CharTokenizer = DEFAULT_TOKENIZER) -> TokenCase:
    """Per-token weights over one sample's response; special tokens are omitted."""
    records = record_weights(model, [sample])
    rows = [(r.position, tokenizer.token_str(r.token), r.weights) for r in records if r.token >= len(SPECIALS)]
    return TokenCase(list(model.order), rows)


def token_class_means(records: Sequence[TokenWeightRecord], specialist: int, tokenizer: CharTokenizer = DEFAULT_TOKENIZER) -> dict[str, float]:
    """Mean weight of one specialist per coarse token class (numeric, alpha, space, other)."""
    acc: dict[str, list[float]] = {}
    for r in records:
        if r.token < len(SPECIALS):
            continue
        cls = tokenizer.token_class(tokenizer.token_str(r.token))
        acc.setdefault(cls, []).append(r.weights[specialist])
    return {k: float(np.mean(v)) for k, v in acc.items()}
