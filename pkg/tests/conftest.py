import numpy as np
import pytest
import torch

from turbdet import _accel


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


class AcceptanceRecorder:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def __init__(self, store):
        self._store = store

    def record(self, number, passed, detail):
        self._store[number] = (bool(passed), detail)
        print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder(_ACCEPTANCE)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
