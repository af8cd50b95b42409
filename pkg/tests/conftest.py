import pytest
import torch

from modeseq.numerics import set_precision

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    set_precision("float64")
    yield
    torch.set_default_dtype(previous)


@pytest.fixture(scope="session")
def criterion(request):
    """Record one pass/fail line per acceptance criterion; returns the verdict."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
