import numpy as np
import pytest

from srko import _backend


@pytest.fixture(params=_backend.available())
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    monkeypatch.setattr(_backend, "impl", _backend.load(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
