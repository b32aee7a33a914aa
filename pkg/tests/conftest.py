import numpy as np
import pytest

from scinterf.panel import Panel
from scinterf.simulation import SimConfig, simulate_panel


def labels(n):
    return tuple(f"u{i + 1}" for i in range(n))


def make_panel(Y, t0):
    Y = np.asarray(Y, dtype=float)
    return Panel(Y, t0, labels(Y.shape[0]))


def sim(t0=200, n0=2, seed=0, **kw):
    """Simulated panel, truth and valid set from the AR(2) factor design."""
    cfg = SimConfig(t0=t0, n_interfered=n0, n_reps=1, n_boot=0, master_seed=seed, **kw)
    return simulate_panel(cfg, 0)


@pytest.fixture
def toy_panel():
    return make_panel([[1, 2, 3, 5], [0, 0, 1, 1], [2, 2, 2, 2]], 2)


@pytest.fixture(scope="session")
def sim_panel():
    return sim(200, 2, seed=11)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
