import numpy as np
import pytest

from tvgroups.core import PanelData

# filled by test_acceptance; printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_panel(rng, n=6, t_len=8, p=2) -> PanelData:
    return PanelData(rng.standard_normal((n, t_len)), tuple(rng.standard_normal((n, t_len)) for _ in range(p)))


def factor_panel(rng, n=40, t_len=30, slopes=(0.5, -1.0), r0=1, noise=0.0, hetero=None):
    """Y = Lambda F' + sum_j X_j theta_ij + noise; returns panel, thetas, lam, f."""
    lam = rng.standard_normal((n, r0))
    f = rng.standard_normal((t_len, r0))
    xs = tuple(rng.standard_normal((n, t_len)) + 0.3 * (lam @ f.T) for _ in slopes)
    thetas = np.tile(np.asarray(slopes, dtype=float), (n, 1)) if hetero is None else hetero
    y = lam @ f.T + noise * rng.standard_normal((n, t_len))
    for j, xj in enumerate(xs):
        y = y + xj * thetas[:, j][:, None]
    return PanelData(y, xs), thetas, lam, f


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
