import numpy as np
import pytest

from klg.base_model import BaseConfig, predict_topk, train_base
from klg.data import generate_corpus


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(sizes=(600, 150, 150), seed=5)


@pytest.fixture(scope="session")
def small_base(small_corpus):
    return train_base(small_corpus, BaseConfig(hidden=16, epochs=3, seed=5))


@pytest.fixture(scope="session")
def small_topk(small_corpus, small_base):
    n = len(small_corpus.vocab)
    sets = {}
    for split in ("train", "dev", "test"):
        for s in predict_topk(small_base.params, small_corpus.split(split), n):
            sets[s.example_id] = s
    return sets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns the boolean."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
