import pytest

from lanid.data import EmbeddingMatrix
from lanid.synthetic import gaussian_intents, synthetic_bundle
from reference import ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def toy():
    """Small 4-intent Gaussian set shared by the plumbing tests."""
    x, y = gaussian_intents(n_intents=4, per_intent=25, dim=8, separation=6.0, seed=3)
    return x, y, synthetic_bundle(y), EmbeddingMatrix(x)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
