from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusedlm.data import (
    DOMAINS,
    TEMPLATES,
    DomainCorpus,
    TrainingExample,
    balanced_batches,
    char_ngrams,
    check_math_response,
    default_templates,
    evaluate_arithmetic,
    load_corpora,
    natural_batches,
    synth_corpus,
    wrap_example,
    write_corpus,
)
from fusedlm.errors import AlignmentError, DomainError, LengthError, SamplerError, VocabError
from fusedlm.tokenizer import BOS, DEFAULT_TOKENIZER, EOS, PAD, CharTokenizer


def test_tokenizer_roundtrip_and_layout():
    tok = CharTokenizer()
    assert tok.vocab_size == 99
    assert (PAD, BOS, EOS) == (0, 1, 2)
    text = "def f(a):\n    return a+1  # ok"
    assert tok.decode(tok.encode(text)) == text
    assert tok.decode([BOS, *tok.encode("hi"), EOS], keep_specials=True) == "<bos>hi<eos>"
    assert tok.decode([BOS, *tok.encode("hi"), EOS]) == "hi"


def test_tokenizer_rejects_unknown():
    with pytest.raises(VocabError):
        DEFAULT_TOKENIZER.encode("café")
    with pytest.raises(VocabError):
        DEFAULT_TOKENIZER.decode([500])


def test_token_classes():
    c = CharTokenizer.token_class
    assert [c("7"), c("+"), c("q"), c(" "), c(".")] == ["numeric", "numeric", "alpha", "space", "other"]


@pytest.mark.parametrize("domain", DOMAINS)
def test_corpus_is_deterministic_unique_and_disjoint(domain):
    a, b = synth_corpus(domain, 300, 7, 40), synth_corpus(domain, 300, 7, 40)
    assert a == b
    keys = [(e.prompt, e.response) for e in a.train + a.held_out]
    assert len(set(keys)) == 340
    assert all(e.domain == domain for e in a.train)
    assert synth_corpus(domain, 300, 8, 40) != a


def test_domains_are_lexically_distinct():
    cs = {d: synth_corpus(d, 400, 0, 0) for d in DOMAINS}
    grams = {d: char_ngrams([e.response for e in c.train]) for d, c in cs.items()}
    for d in DOMAINS:
        for o in DOMAINS:
            if d < o:
                overlap = len(grams[d] & grams[o]) / min(len(grams[d]), len(grams[o]))
                assert overlap < 0.25, (d, o, overlap)


def test_math_corpus_is_correct():
    c = synth_corpus("math", 500, 1, 50)
    assert all(check_math_response(e.prompt, e.response) for e in c.train + c.held_out)


def test_arithmetic_evaluator():
    assert evaluate_arithmetic("12+7") == 19
    assert evaluate_arithmetic("(3-5)*4") == -8
    with pytest.raises(ValueError):
        evaluate_arithmetic("2**3")
    assert check_math_response("Compute: 12+7", "12+7=19. The answer is 19.")
    assert not check_math_response("Compute: 12+7", "12+7=18. The answer is 18.")
    assert not check_math_response("Compute: 12+7", "garbage")


def test_unknown_domain():
    with pytest.raises(DomainError):
        synth_corpus("poetry", 10, 0)


def test_empty_response_rejected():
    with pytest.raises(ValueError):
        TrainingExample("text", "hi", "")


def test_wrap_example_alignment():
    ex = TrainingExample("math", "Compute: 1+2", "1+2=3. The answer is 3.")
    w = wrap_example(ex, default_templates())
    resp = DEFAULT_TOKENIZER.encode(ex.response) + [EOS]
    assert w.length == len(resp)
    for toks, st, t in zip(w.tokens, w.starts, default_templates()):
        assert toks[0] == BOS
        assert list(toks[st : st + w.length]) == resp
        assert DEFAULT_TOKENIZER.decode(toks[1:st]) == t.prefix + ex.prompt + t.infix
    w.check_alignment()
    w.tokens[1] = w.tokens[1].copy()
    w.tokens[1][w.starts[1]] += 1
    with pytest.raises(AlignmentError):
        w.check_alignment()


def test_wrap_example_length_limit():
    ex = TrainingExample("text", "x" * 50, "y" * 50)
    with pytest.raises(LengthError):
        wrap_example(ex, [TEMPLATES["text"]], max_seq_len=64)


def _corpora(sizes, seed=0):
    return [synth_corpus(d, n, seed, 1) for d, n in zip(DOMAINS, sizes)]


def test_balanced_sampler_histogram_and_interleave():
    corpora = _corpora([40, 90, 130])
    n = 4
    for batch in balanced_batches(corpora, n, seed=3, num_batches=3 * 130 // n):
        assert Counter(e.domain for e in batch) == {d: n for d in DOMAINS}
        assert [e.domain for e in batch[:3]] == list(DOMAINS)


def test_balanced_sampler_covers_each_epoch():
    corpora = _corpora([12, 20, 16])
    batches = list(balanced_batches(corpora, 4, seed=0, num_batches=3))
    text = [e for b in batches for e in b if e.domain == "text"]
    assert sorted(map(id, text)) == sorted(map(id, corpora[0].train))


def test_balanced_sampler_determinism():
    corpora = _corpora([30, 30, 30])
    a = list(balanced_batches(corpora, 2, seed=9, num_batches=20))
    b = list(balanced_batches(corpora, 2, seed=9, num_batches=20))
    assert a == b


def test_balanced_sampler_too_small():
    with pytest.raises(SamplerError):
        next(balanced_batches(_corpora([3, 30, 30]), 4, seed=0))


def test_natural_sampler_follows_corpus_sizes():
    corpora = _corpora([50, 100, 250])
    counts = Counter(e.domain for b in natural_batches(corpora, 40, seed=0, num_batches=200) for e in b)
    total = sum(counts.values())
    assert abs(counts["math"] / total - 250 / 400) < 0.02
    assert abs(counts["text"] / total - 50 / 400) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(5, 40), min_size=2, max_size=3), st.integers(1, 5), st.integers(0, 10_000))
def test_balanced_sampler_property(sizes, n, seed):
    corpora = [DomainCorpus(f"d{i}", [TrainingExample(f"d{i}", str(j), "r") for j in range(s)]) for i, s in enumerate(sizes)]
    if min(sizes) < n:
        with pytest.raises(SamplerError):
            next(balanced_batches(corpora, n, seed))
        return
    for batch in balanced_batches(corpora, n, seed, num_batches=3 * max(sizes) // n + 1):
        assert Counter(e.domain for e in batch) == {c.domain: n for c in corpora}
        assert len({e.prompt for e in batch if e.domain == "d0"}) == n


def test_corpus_files_roundtrip(tmp_path):
    corpora = [synth_corpus(d, 30, 2, 5) for d in DOMAINS]
    manifest = {"domains": {c.domain: write_corpus(c, tmp_path / f"{c.domain}.jsonl") for c in corpora}}
    (tmp_path / "manifest.json").write_text(__import__("json").dumps(manifest))
    assert load_corpora(tmp_path) == corpora
