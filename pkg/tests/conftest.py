import numpy as np
import pytest

from plumeinv.dispersion import GridSpec


@pytest.fixture
def small_grid():
    return GridSpec(nx=41, ny=11, N=20, T=60.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
