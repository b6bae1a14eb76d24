from datetime import date

import pytest

from fxlv.market_data import DiscountCurve, ForwardCurve
from fxlv.reference_pricing import build_instruments
from fxlv.sample_market import EXCLUDED, sample_deals, sample_snapshot


@pytest.fixture(scope="session")
def snapshot():
    return sample_snapshot()


@pytest.fixture(scope="session")
def instruments(snapshot):
    return build_instruments(snapshot, EXCLUDED)


@pytest.fixture(scope="session")
def deals(snapshot):
    return sample_deals(snapshot)


@pytest.fixture(scope="session")
def valuation():
    return date(2022, 9, 26)


@pytest.fixture(scope="session")
def flat_curves(valuation):
    """Constant forward 7.0 and zero rates out to two years."""
    end = date(2024, 9, 26)
    return (ForwardCurve(valuation, (valuation, end), (7.0, 7.0)),
            DiscountCurve(valuation, (valuation, end), (1.0, 1.0)))


@pytest.fixture(scope="session")
def random_surface(snapshot, instruments):
    """Initial surface with every pillar scaled by U(0.8, 1.2)."""
    import numpy as np

    from fxlv.calibrator import initial_surface

    base = initial_surface(snapshot, instruments)
    rng = np.random.default_rng(7)
    return base.with_vols(base.vols * rng.uniform(0.8, 1.2, base.shape))


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
