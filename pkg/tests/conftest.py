import numpy as np
import pytest

from chemokit.grid import make_grid2d, make_radial_grid

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def report(number: int, name: str, passed: bool, detail: str) -> None:
    """Record one acceptance line; printed again in the terminal summary."""
    ACCEPTANCE[number] = (name, passed, detail)
    print(f"ACCEPTANCE {number:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return make_grid2d(-1.0, 1.0, -1.5, 1.5, 6, 8)


@pytest.fixture
def small_radial():
    return make_radial_grid(1.0, 8)
