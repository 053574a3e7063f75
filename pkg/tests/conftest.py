import numpy as np
import pytest

from gazeloss.tensor import default_dtype

_LINES = pytest.StashKey()


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def acceptance(request):
    """Callable ``(number, name, ok, detail, elapsed, budget)`` recording one criterion line."""
    lines = request.config.stash.setdefault(_LINES, {})

    def report(number, name, ok, detail, elapsed, budget):
        within = elapsed < budget
        status = "PASS" if ok and within else "FAIL"
        lines[number] = f"[criterion {number:2d}] {status} {name}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
        print("\n" + lines[number])
        assert ok, detail
        assert within, f"took {elapsed:.1f}s, budget {budget:.0f}s"

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
