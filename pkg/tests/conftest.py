import numpy as np
import pytest

from stocktl import data as D


def make_panel(returns, membership=None, tickers=None):
    returns = np.asarray(returns, dtype=np.float64)
    n_days, n_stocks = returns.shape
    if membership is None:
        membership = np.ones_like(returns, dtype=bool)
    if tickers is None:
        tickers = [f"S{j:03d}" for j in range(n_stocks)]
    dates = [f"d{t:05d}" for t in range(n_days)]
    return D.ReturnsPanel(dates, tickers, returns, membership)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_panel():
    return D.generate_synthetic_panel(1000, 25, 0.5, seed=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
