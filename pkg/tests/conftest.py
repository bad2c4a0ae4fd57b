import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stylerl.fixtures import make_corpus, write_corpus
from stylerl.tensor import precision

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# one "criterion N: PASS/FAIL" line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture(scope="session")
def small_corpus():
    """4 content + 2 style images at 16x16."""
    return make_corpus(n_content=4, n_style=2, size=16, seed=3)


@pytest.fixture(scope="session")
def corpus_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return write_corpus(root, n_content=3, n_style=2, size=16, seed=5, held_out=1)
