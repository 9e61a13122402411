"""Suite-wide timing and the acceptance summary section.

Acceptance tests record one human-readable verdict line each; those lines are
replayed after the run (terminal summaries are never captured), together with
the total wall time the whole suite took.
"""

import time

import pytest

_T0_KEY = pytest.StashKey()
_LINES_KEY = pytest.StashKey()


def pytest_configure(config):
    config.stash[_T0_KEY] = time.time()
    config.stash[_LINES_KEY] = []


@pytest.fixture(scope="session")
def suite_start(request):
    """Wall-clock time at which this pytest session began."""
    return request.config.stash[_T0_KEY]


@pytest.fixture(scope="session")
def verdict(request):
    """Callable recording one pass/fail line for the end-of-run summary."""
    lines = request.config.stash[_LINES_KEY]

    def note(line: str) -> None:
        lines.append(line)
        print(line)

    return note


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_LINES_KEY]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
    elapsed = time.time() - config.stash[_T0_KEY]
    terminalreporter.write_line(f"suite wall time {elapsed:.1f}s")
