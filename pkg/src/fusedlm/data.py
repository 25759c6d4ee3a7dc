"""Synthetic three-domain corpora, prompt templates, and batch samplers."""

from __future__ import annotations

import ast
import json
import operator
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, LengthError, SamplerError
from .tokenizer import BOS, DEFAULT_TOKENIZER, EOS, CharTokenizer

DOMAINS = ("text", "code", "math")


@dataclass(frozen=True)
class TrainingExample:
    domain: str
    prompt: str
    response: str

    def __post_init__(self) -> None:
        if not self.response:
            raise ValueError("response must be non-empty")

    def to_record(self) -> dict:
        return {"domain": self.domain, "prompt": self.prompt, "response": self.response}


@dataclass(frozen=True)
class PromptTemplate:
    """``prefix + prompt + infix`` precedes the response, ``suffix`` follows it."""

    name: str
    prefix: str
    infix: str
    suffix: str = ""

    def render(self, prompt: str, response: str = "") -> str:
        return f"{self.prefix}{prompt}{self.infix}{response}{self.suffix}"


# Short analogues of the three chat formats the original specialists were tuned on.
TEMPLATES = {
    "text": PromptTemplate("text", "User: ", "\nAssistant: "),
    "code": PromptTemplate("code", "[INST] ", " [/INST] "),
    "math": PromptTemplate("math", "### Instruction:\n", "\n\n### Response:\n"),
}


@dataclass
class WrappedExample:
    """One example rendered once per specialist template.

    ``tokens[s]`` starts with BOS. The response occupies
    ``tokens[s][starts[s] : starts[s] + length]`` and ends with EOS; those ids are
    identical for every ``s``.
    """

    tokens: list[np.ndarray]
    starts: list[int]
    length: int
    domain: str

    @property
    def response_ids(self) -> np.ndarray:
        return self.tokens[0][self.starts[0] : self.starts[0] + self.length]

    def check_alignment(self) -> None:
        from .errors import AlignmentError

        ref = self.response_ids
        for s, (toks, st) in enumerate(zip(self.tokens, self.starts)):
            if st < 1:
                raise AlignmentError(f"specialist {s}: response must be preceded by at least BOS")
            span = toks[st : st + self.length]
            if span.shape != ref.shape or not np.array_equal(span, ref):
                raise AlignmentError(f"specialist {s}: response span differs from specialist 0")


@dataclass
class DomainCorpus:
    domain: str
    train: list[TrainingExample]
    held_out: list[TrainingExample] = field(default_factory=list)

    def split(self, name: str) -> list[TrainingExample]:
        if name == "train":
            return self.train
        if name in ("held_out", "heldout", "test"):
            return self.held_out
        raise KeyError(name)


# ---------------------------------------------------------------- generators

_NOUNS = [
    "cat", "dog", "fox", "bird", "horse", "river", "forest", "garden", "child", "farmer",
    "teacher", "sailor", "village", "mountain", "lake", "window", "story", "letter", "song", "road",
]
_ADJS = ["quiet", "small", "old", "happy", "brown", "gentle", "bright", "lonely", "tired", "green"]
_VERBS = ["sleeps", "walks", "waits", "sings", "rests", "looks", "travels", "stays", "listens", "plays"]
_PREPS = ["near", "beside", "under", "behind", "across", "along"]
_TEXT_ASKS = ["Tell me about the {n}.", "Describe the {n}.", "Write a line about the {n}.", "What does the {n} do?"]

_VARS = list("abcdghkmnpqrstuvwxyz")
_CODE_TASKS = ["max", "min", "abs", "sum", "sign", "clamp", "swap", "set"]

_OPS = {"+": operator.add, "-": operator.sub, "*": operator.mul}


def _text_example(rng: random.Random) -> TrainingExample:
    noun = rng.choice(_NOUNS)
    ask = rng.choice(_TEXT_ASKS).format(n=noun)
    adj, verb, prep = rng.choice(_ADJS), rng.choice(_VERBS), rng.choice(_PREPS)
    other = rng.choice([w for w in _NOUNS if w != noun])
    adj2 = rng.choice(_ADJS)
    response = f"The {adj} {noun} {verb} {prep} the {adj2} {other}."
    return TrainingExample("text", ask, response)


def _code_example(rng: random.Random) -> TrainingExample:
    task = rng.choice(_CODE_TASKS)
    a, b, c = rng.sample(_VARS, 3)
    k = None
    if task == "max":
        body = f"if ({a} > {b}) {{\n  ret {a};\n}}\nret {b};"
        sig = f"{a}, {b}"
    elif task == "min":
        body = f"if ({a} < {b}) {{\n  ret {a};\n}}\nret {b};"
        sig = f"{a}, {b}"
    elif task == "abs":
        body = f"if ({a} < 0) {{\n  ret -{a};\n}}\nret {a};"
        sig = a
    elif task == "sum":
        body = f"let {c} = {a} + {b};\nret {c};"
        sig = f"{a}, {b}"
    elif task == "sign":
        body = f"if ({a} > 0) {{\n  ret 1;\n}}\nret 0;"
        sig = a
    elif task == "clamp":
        body = f"if ({a} > {b}) {{\n  ret {b};\n}}\nret {a};"
        sig = f"{a}, {b}"
    elif task == "swap":
        body = f"let {c} = {a};\n{a} = {b};\n{b} = {c};"
        sig = f"{a}, {b}"
    else:
        k = rng.randint(0, 9)
        body = f"{a} = {k};\nret {a};"
        sig = a
    body = body.replace("\n", "\n  ")
    response = f"fn {task}({sig}) {{\n  {body}\n}}"
    ask = f"Code: {task} {sig.replace(', ', ' ')}" + ("" if k is None else f" {k}")
    return TrainingExample("code", ask, response)


def _math_example(rng: random.Random) -> TrainingExample:
    a, b = rng.randint(0, 99), rng.randint(0, 99)
    op = rng.choice("+-*")
    if op == "*":
        b = rng.randint(0, 12)
    if rng.random() < 0.5:
        expr = f"{a}{op}{b}"
        res = _OPS[op](a, b)
        response = f"{expr}={res}. The answer is {res}."
    else:
        c = rng.randint(1, 9)
        op2 = rng.choice("+-")
        first = _OPS[op](a, b)
        res = _OPS[op2](first, c)
        expr = f"{a}{op}{b}{op2}{c}"
        response = f"{a}{op}{b}={first}, {first}{op2}{c}={res}. The answer is {res}."
    return TrainingExample("math", f"Compute: {expr}", response)


_GENERATORS = {"text": _text_example, "code": _code_example, "math": _math_example}


def synth_corpus(domain: str, size: int, seed: int, held_out: int | None = None) -> DomainCorpus:
    """Generate ``size`` unique training examples plus a disjoint held-out split."""
    if domain not in _GENERATORS:
        raise DomainError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if size <= 0:
        raise ValueError("size must be positive")
    if held_out is None:
        held_out = size // 10
    gen = _GENERATORS[domain]
    # str seeds hash deterministically under random.Random
    rng = random.Random(f"{domain}:{seed}")
    seen: set[tuple[str, str]] = set()
    out: list[TrainingExample] = []
    tries = 0
    while len(out) < size + held_out:
        ex = gen(rng)
        tries += 1
        if tries > 50 * (size + held_out) + 1000:
            raise DomainError(f"{domain}: cannot draw {size + held_out} unique examples")
        key = (ex.prompt, ex.response)
        if key in seen:
            continue
        seen.add(key)
        out.append(ex)
    return DomainCorpus(domain, out[:size], out[size:])


def evaluate_arithmetic(expr: str) -> int:
    """Evaluate an integer expression of + - * and parentheses."""
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        if isinstance(node, ast.BinOp):
            ops = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}
            if type(node.op) in ops:
                return ops[type(node.op)](ev(node.left), ev(node.right))
        raise ValueError(f"unsupported expression: {expr!r}")

    return ev(ast.parse(expr, mode="eval"))


def check_math_response(prompt: str, response: str) -> bool:
    """True when every ``lhs=rhs`` step holds and the final answer matches the prompt."""
    expr = prompt.split(":", 1)[1].strip() if ":" in prompt else prompt.strip()
    try:
        target = evaluate_arithmetic(expr)
        body, _, answer = response.partition(". The answer is ")
        for step in body.split(", "):
            lhs, rhs = step.split("=")
            if evaluate_arithmetic(lhs) != int(rhs):
                return False
        return int(answer.rstrip(".")) == target and int(body.split(", ")[-1].split("=")[1]) == target
    except (ValueError, SyntaxError, IndexError):
        return False


# ---------------------------------------------------------------- templating


def wrap_example(
    ex: TrainingExample,
    templates: Sequence[PromptTemplate],
    tokenizer: CharTokenizer = DEFAULT_TOKENIZER,
    max_seq_len: int | None = None,
) -> WrappedExample:
    response = tokenizer.encode(ex.response) + [EOS]
    tokens, starts = [], []
    for t in templates:
        head = [BOS] + tokenizer.encode(t.prefix + ex.prompt + t.infix)
        seq = head + response + tokenizer.encode(t.suffix)
        if max_seq_len is not None and len(seq) > max_seq_len:
            raise LengthError(f"template {t.name!r}: rendered length {len(seq)} > max_seq_len {max_seq_len}")
        tokens.append(np.asarray(seq, dtype=np.int64))
        starts.append(len(head))
    return WrappedExample(tokens, starts, len(response), ex.domain)


def default_templates(order: Sequence[str] = DOMAINS) -> list[PromptTemplate]:
    return [TEMPLATES[d] for d in order]


# ---------------------------------------------------------------- samplers


def balanced_batches(
    corpora: Sequence[DomainCorpus], n: int, seed: int, num_batches: int | None = None
) -> Iterator[list[TrainingExample]]:
    """Yield batches holding exactly ``n`` training examples from each corpus.

    Each corpus is walked through a fresh permutation per epoch; leftovers smaller
    than ``n`` roll into the next epoch's reshuffle. Within a batch the domains are
    interleaved round-robin in corpus order.
    """
    for c in corpora:
        if len(c.train) < n:
            raise SamplerError(f"{c.domain}: {len(c.train)} training examples < per-domain batch {n}")
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(len(c.train)) for c in corpora]
    cursors = [0] * len(corpora)
    emitted = 0
    while num_batches is None or emitted < num_batches:
        picks = []
        for i, c in enumerate(corpora):
            if cursors[i] + n > len(orders[i]):
                orders[i] = rng.permutation(len(c.train))
                cursors[i] = 0
            picks.append([c.train[j] for j in orders[i][cursors[i] : cursors[i] + n]])
            cursors[i] += n
        yield [picks[d][k] for k in range(n) for d in range(len(corpora))]
        emitted += 1


def natural_batches(
    corpora: Sequence[DomainCorpus], batch_size: int, seed: int, num_batches: int | None = None
) -> Iterator[list[TrainingExample]]:
    """Yield batches drawn from the pooled corpora with no per-domain quota."""
    pool = [ex for c in corpora for ex in c.train]
    if len(pool) < batch_size:
        raise SamplerError(f"pool of {len(pool)} examples < batch size {batch_size}")
    rng = np.random.default_rng(seed)
    order, cursor, emitted = rng.permutation(len(pool)), 0, 0
    while num_batches is None or emitted < num_batches:
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(pool)), 0
        yield [pool[j] for j in order[cursor : cursor + batch_size]]
        cursor += batch_size
        emitted += 1


# ---------------------------------------------------------------- corpus files


def write_corpus(corpus: DomainCorpus, path: Path) -> dict:
    """Write one JSONL file (train records then held-out records); return its manifest entry."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for ex in corpus.train + corpus.held_out:
            f.write(json.dumps(ex.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    n = len(corpus.train)
    return {
        "file": path.name,
        "train": list(range(n)),
        "held_out": list(range(n, n + len(corpus.held_out))),
    }


def read_corpus(domain: str, directory: Path, manifest: dict) -> DomainCorpus:
    entry = manifest["domains"][domain]
    records = []
    with (Path(directory) / entry["file"]).open(encoding="utf-8") as f:
        for line in f:
            r = json.loads(line)
            records.append(TrainingExample(r["domain"], r["prompt"], r["response"]))
    return DomainCorpus(
        domain,
        [records[i] for i in entry["train"]],
        [records[i] for i in entry["held_out"]],
    )


def load_corpora(directory: Path, domains: Sequence[str] = DOMAINS) -> list[DomainCorpus]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [read_corpus(d, directory, manifest) for d in domains]


def char_ngrams(texts: Sequence[str], n: int = 4) -> set[str]:
    grams: set[str] = set()
    for t in texts:
        grams.update(t[i : i + n] for i in range(len(t) - n + 1))
    return grams
