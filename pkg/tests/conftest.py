import numpy as np
import pytest

from headatlas.corpus import Tokenizer, generate_corpus
from headatlas.model import ModelConfig, init_weights


@pytest.fixture(scope="session")
def tok():
    return Tokenizer()


@pytest.fixture(scope="session")
def records():
    return generate_corpus(48, seed=3)


@pytest.fixture(scope="session")
def tiny():
    cfg = ModelConfig(n_layers=2, n_heads=2, model_dim=16, mlp_dim=32, vocab_size=50,
                      max_seq_len=32)
    return init_weights(cfg, seed=1)


@pytest.fixture(scope="session")
def small_lm(tok):
    """Untrained model over the real vocabulary, big enough for bios."""
    cfg = ModelConfig(n_layers=2, n_heads=4, model_dim=32, mlp_dim=64, vocab_size=len(tok),
                      max_seq_len=96)
    return init_weights(cfg, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture(scope="session")
def acceptance_lines(pytestconfig):
    return pytestconfig.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
