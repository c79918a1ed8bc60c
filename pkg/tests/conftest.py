import numpy as np
import pytest

from cnncascade.cli import default_model_path
from cnncascade.modelspec import load_model, random_cascade

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion(n, title, passed, detail)``."""
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (title, bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")


@pytest.fixture(scope="session")
def toy_model():
    return load_model(default_model_path())


@pytest.fixture(scope="session")
def random_model():
    return random_cascade(7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
