import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Record and print one pass/fail line, then assert it."""

    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}"
        request.config.stash[ACCEPTANCE].append((number, line))
        print(line)
        assert passed, line

    return record
