import numpy as np
import pytest

from fusedlm.data import DOMAINS, synth_corpus
from fusedlm.fuser import FusedModel
from fusedlm.lm import LmConfig, Specialist

TINY = LmConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=128)


def tiny_specialists(cfg: LmConfig = TINY, seed: int = 0, zero_head: bool = False) -> list[Specialist]:
    return [Specialist.create(cfg, d, seed * 10 + i, zero_head=zero_head) for i, d in enumerate(DOMAINS)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpora():
    return [synth_corpus(d, 64, 3, 12) for d in DOMAINS]


@pytest.fixture
def tiny_fused():
    return FusedModel.create(tiny_specialists(), seed=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
