from __future__ import annotations

import json
from pathlib import Path

import pytest

from dispa.synthetic import SyntheticConfig, generate

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def reference_corpus() -> list[dict]:
    """Molecules with counts and decompositions recorded from a reference toolkit."""
    return json.loads((FIXTURES / "reference_corpus.json").read_text())["molecules"]


@pytest.fixture(scope="session")
def small_synthetic():
    return generate(SyntheticConfig(n_cells=12, n_drugs=10, seed=3))


@pytest.fixture(scope="session")
def small_dataset(small_synthetic):
    from dispa.embedding import EmbeddingConfig

    return small_synthetic.assemble(EmbeddingConfig(dim=16)).dataset


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
