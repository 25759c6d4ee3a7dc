import math

import numpy as np
import pytest

from fusedlm import numcore as nc
from fusedlm.data import DOMAINS, TrainingExample, synth_corpus
from fusedlm.errors import CheckpointError, LengthError, VocabError
from fusedlm.lm import (
    LmConfig,
    PretrainConfig,
    PretrainState,
    Specialist,
    cross_entropy_on,
    load_specialist,
    perplexity,
    pretrain_run,
    pretrain_specialist,
)

from conftest import TINY


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(d_model=10, n_heads=3)
    assert LmConfig().head_dim == 32


def test_untrained_model_is_uniform():
    spec = Specialist.create(TINY, "text", 0)
    ex = [TrainingExample("text", "Describe the cat.", "The old cat sleeps.")]
    assert cross_entropy_on(spec, ex) == pytest.approx(math.log(99), abs=1e-12)
    assert perplexity(spec, ex) == pytest.approx(99.0, rel=1e-12)


def test_forward_shapes_and_causality(rng):
    spec = Specialist.create(TINY, "code", 1, zero_head=False)
    toks = rng.integers(3, 99, size=(2, 10))
    out = spec.forward(toks)
    assert out.hidden.shape == (2, 10, 16) and out.logits.shape == (2, 10, 99)
    changed = toks.copy()
    changed[:, 7:] = 5
    out2 = spec.forward(changed)
    np.testing.assert_array_equal(out.logits.data[:, :7], out2.logits.data[:, :7])
    single = spec.forward(toks[0])
    np.testing.assert_allclose(single.logits.data, out.logits.data[0], atol=1e-12)


def test_input_validation():
    spec = Specialist.create(TINY, "text", 0)
    with pytest.raises(LengthError):
        spec.forward(np.ones(TINY.max_seq_len + 1, dtype=int))
    with pytest.raises(VocabError):
        spec.forward(np.array([1, 120]))


def test_kv_cache_matches_recompute(rng):
    spec = Specialist.create(TINY, "math", 2, zero_head=False)
    toks = rng.integers(3, 99, size=30)
    full = spec.forward(toks)
    cache = spec.new_cache()
    hs, ls = [], []
    for chunk in (toks[:12], toks[12:13], toks[13:20], toks[20:]):
        h, lg = spec.extend(cache, chunk)
        hs.append(h)
        ls.append(lg)
    np.testing.assert_allclose(np.concatenate(ls), full.logits.data, atol=1e-6, rtol=0)
    np.testing.assert_allclose(np.concatenate(hs), full.hidden.data, atol=1e-6, rtol=0)
    assert cache.length == 30
    with pytest.raises(LengthError):
        spec.extend(cache, np.ones(TINY.max_seq_len, dtype=int))


def test_checkpoint_roundtrip(tmp_path):
    spec = Specialist.create(TINY, "code", 4, zero_head=False)
    spec.save(tmp_path / "s.ckpt", {"tag": 1})
    back, meta, opt = load_specialist(tmp_path / "s.ckpt")
    assert back.checksum() == spec.checksum()
    assert back.domain == "code" and back.template == spec.template
    assert meta["tag"] == 1 and opt is None
    from fusedlm.fuser import FusedModel

    with pytest.raises(CheckpointError):
        FusedModel.load(tmp_path / "s.ckpt")


def test_pretraining_learns_and_resumes_bit_identically():
    corpus = synth_corpus("math", 200, 0, 20)
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, max_seq_len=128)
    pc = PretrainConfig(steps=30, batch_size=8, lr=3e-3, warmup=5)
    full = pretrain_run(corpus, cfg, pc, seed=3)
    assert full.losses[-1] < full.losses[0] - 0.5
    assert cross_entropy_on(full.specialist, corpus.held_out) < math.log(99)

    half = pretrain_run(corpus, cfg, pc, seed=3, stop_after=12)
    assert half.optimizer.step == 12
    resumed = pretrain_run(corpus, cfg, pc, seed=3, resume=half)
    assert resumed.specialist.checksum() == full.specialist.checksum()


def test_pretraining_resume_through_checkpoint(tmp_path):
    corpus = synth_corpus("text", 100, 0, 10)
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, max_seq_len=128)
    pc = PretrainConfig(steps=10, batch_size=4, lr=3e-3, warmup=2)
    ref = pretrain_specialist(corpus, cfg, pc, seed=1)
    part = pretrain_run(corpus, cfg, pc, seed=1, stop_after=4)
    part.specialist.save(tmp_path / "p.ckpt", optimizer=part.optimizer)
    spec, _, opt = load_specialist(tmp_path / "p.ckpt")
    done = pretrain_run(corpus, cfg, pc, seed=1, resume=PretrainState(spec, opt))
    assert done.specialist.checksum() == ref.checksum()


def test_specialist_gradients_finite_difference():
    from gradcheck import check_leaves

    cfg = LmConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=32)
    spec = Specialist.create(cfg, "text", 0, zero_head=False)
    toks = np.array([[1, 40, 41, 42, 43, 44, 2], [1, 50, 51, 52, 2, 0, 0]])
    tgt = np.roll(toks, -1, axis=1)
    mask = tgt != 0

    def loss():
        return nc.cross_entropy(spec.head(spec.hidden_states(toks)), tgt, mask)

    loss().backward()
    with nc.no_grad():
        check_leaves(lambda: loss().item(), spec.params, per_leaf=6)
