from datetime import date
from pathlib import Path

import numpy as np
import pytest

from commodity_slv.market_data import DiscountCurve, FuturesCurve, RollCalendar
from commodity_slv.synthetic import REFERENCE_DATE, synthetic_market

DATA = Path(__file__).resolve().parents[1] / "src" / "commodity_slv" / "data"
ACCEPTANCE = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {n:>2}. {name}: {detail}"
        lines[n] = line
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def calendar() -> RollCalendar:
    return RollCalendar()


@pytest.fixture(scope="session")
def ref() -> date:
    return REFERENCE_DATE


@pytest.fixture(scope="session")
def flat_discount(ref) -> DiscountCurve:
    return DiscountCurve.flat(ref, 0.02)


@pytest.fixture(scope="session")
def small_market():
    """Six-maturity synthetic market and its generating local vol."""
    return synthetic_market(6)


@pytest.fixture(scope="session")
def full_market():
    return synthetic_market()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_curve(ref, maturities, base=60.0, slope=0.5) -> FuturesCurve:
    return FuturesCurve(ref, tuple(maturities), tuple(base + slope * i for i in range(len(maturities))))
