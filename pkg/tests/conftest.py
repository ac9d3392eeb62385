"""Shared fixtures: a small synthetic corpus on disk and trained models.

The trained-model fixtures run the real training loop once per session;
they are session-scoped because several test modules compare against the
same canonical run.
"""

import time

import pytest

from iternet.config import ModelSection, RunConfig
from iternet.synth import write_corpus
from iternet.training import load_split, train

ACCEPTANCE_LINES = []


def record_acceptance(line):
    """Collect acceptance-criterion verdicts for the end-of-run summary."""
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus")
    write_corpus(str(path), 30, 20, seed=0)
    return str(path)


@pytest.fixture(scope="session")
def test_samples(corpus_dir):
    return load_split(corpus_dir, "test")


@pytest.fixture(scope="session")
def trained_n4(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained_n4")
    t0 = time.perf_counter()
    result = train(RunConfig(), corpus_dir, str(out))
    result["seconds"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def trained_n1(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained_n1")
    cfg = RunConfig(model=ModelSection(iterations=1))
    result = train(cfg, corpus_dir, str(out))
    result["config"] = cfg
    return result
