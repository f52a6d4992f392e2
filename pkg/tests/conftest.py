import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cpip.simulation import setup_config, truth_oracle  # noqa: E402


@pytest.fixture(scope="session")
def truth_setup1():
    return truth_oracle(setup_config(1), n_mc=10**6, seed=(99, 1))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
