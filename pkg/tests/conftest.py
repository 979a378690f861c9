import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import ACCEPTANCE_LOG  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion logged to the summary")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE_LOG:
        terminalreporter.write_line(f"[{status}] {name}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def tmp(tmp_path):
    return tmp_path
