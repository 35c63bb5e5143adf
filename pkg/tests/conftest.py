import numpy as np
import pytest

from xdmmd.embedding import EmbeddingSet


def col(values):
    """One-dimensional embeddings as an (n, 1) column."""
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


def emb1d(x, y):
    return EmbeddingSet.from_arrays(col(x), col(y))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[k])
