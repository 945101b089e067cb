"""Shared fixtures: a small pretrained model reused across test modules, and
a collector that prints one line per acceptance criterion at session end."""

from __future__ import annotations

import pytest

from promptcal.calibration import DEFAULT_SOFT_TOKEN_TEXT
from promptcal.corpus import bundled_test_corpus, bundled_train_corpus, generate_corpus
from promptcal.harness import load_default_ensemble
from promptcal.model import ModelConfig, PretrainConfig, pretrain

pytest.register_assert_rewrite("tests.test_autodiff", "tests.test_rouge", "tests.test_cli")

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool) -> None:
    _ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}")


@pytest.fixture
def acceptance_log():
    return record_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


TINY_MODEL = ModelConfig(embed_dim=16, n_blocks=1, n_heads=2, ffn_dim=16, max_seq_len=96, decode_max_len=10)


@pytest.fixture(scope="session")
def ensemble():
    return load_default_ensemble()


@pytest.fixture(scope="session")
def train_corpus():
    return bundled_train_corpus()


@pytest.fixture(scope="session")
def test_corpus():
    return bundled_test_corpus()


@pytest.fixture(scope="session")
def tiny_lm(ensemble):
    """Fast model for unit tests: small dims, short pretraining, full vocab coverage."""
    corpus = generate_corpus(40, seed=11)
    cfg = PretrainConfig(max_epochs=4, seed=3, model=TINY_MODEL)
    return pretrain(corpus, cfg, extra_texts=list(ensemble.prompts) + [DEFAULT_SOFT_TOKEN_TEXT])


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(40, seed=11)
