from __future__ import annotations

import pytest

from trustplane.coverage import builtin_paper_matrix
from trustplane.deploy import deploy
from trustplane.kernel import KernelConfig
from trustplane.model import builtin_paper_architecture

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def spec():
    return builtin_paper_architecture()


@pytest.fixture
def matrix():
    return builtin_paper_matrix()


@pytest.fixture
def kernel(spec):
    return deploy(spec, KernelConfig())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
