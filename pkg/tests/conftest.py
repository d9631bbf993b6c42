import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from disentlab.corpus import CorpusConfig, build_corpus  # noqa: E402


@pytest.fixture(scope="session")
def default_corpus():
    return build_corpus(CorpusConfig())


@pytest.fixture(scope="session")
def small_corpus():
    cfg = CorpusConfig(num_speakers=4, utterances_per_speaker=8, valid_per_speaker=2,
                       test_per_speaker=2, num_parallel_pairs=4, min_tokens=6, max_tokens=8)
    return build_corpus(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
