import numpy as np
import pytest

from semires.operators import SupportLayout, make_grid, make_potential
from semires.resolvent import measure_a

SWEEP = (0.1, 0.07, 0.05, 0.035, 0.025)

# Dense oracle setting: N = 400 nodes, a layout scaled to fit [-6.5, 6.5].
SMALL_LAYOUT = SupportLayout(R0=0.5, s=0.5, absorber_width=2.0, absorber_ramp=1.5)
SMALL_L = 6.5
SMALL_N = 400
SMALL_H = 0.3

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def small_grid():
    return make_grid(SMALL_L, 2 * SMALL_L / (SMALL_N - 1))


def small_potential(family):
    return make_potential(family, R0=SMALL_LAYOUT.R0)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_RESULTS


@pytest.fixture(scope="session")
def a_curves():
    """Measured a(h) at E = 1 on the standard sweep, shared across modules."""
    return {
        fam: measure_a(SWEEP, make_potential(fam), 1.0, label=fam)
        for fam in ("zero", "nontrap_bump", "barrier_top")
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
