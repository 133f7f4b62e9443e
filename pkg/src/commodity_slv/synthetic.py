"""Fully synthetic commodity market used by the examples, tests and CLI fixtures.

Futures vols are produced by a forward run of a known smiled spot-factor
local volatility, so a calibrated model can reproduce them exactly.
"""

from __future__ import annotations

import math
from datetime import date

import numpy as np

from .localvol_calib import synthetic_futures_surfaces
from .market_data import (
    DiscountCurve,
    FuturesCurve,
    MarketSnapshot,
    RollCalendar,
    VolQuote,
    VolSurface,
    write_market,
    year_fraction,
)
from .pde_solver import GridConfig, LocalVolGrid

REFERENCE_DATE = date(2019, 12, 16)
MATURITIES = (
    date(2020, 1, 21), date(2020, 2, 20), date(2020, 3, 20), date(2020, 4, 21), date(2020, 5, 19),
    date(2020, 6, 22), date(2020, 7, 21), date(2020, 8, 20), date(2020, 9, 22), date(2020, 10, 20),
    date(2020, 11, 20), date(2020, 12, 21), date(2021, 1, 20), date(2021, 2, 22),
)
MONEYNESS = (0.8, 0.9, 1.0, 1.1, 1.2)
TRUE_MEAN_REVERSION = 0.3
RATE = 0.018
OPTION_EXPIRY_LAG = 3

# stochastic parameters of the micro model that generates the index smile
TRUE_MICRO = {"a": TRUE_MEAN_REVERSION, "beta": 0.5, "chi": 0.5, "rho": -0.3}
INDEX_EXPIRIES = (date(2020, 3, 16), date(2020, 6, 16), date(2020, 9, 16), date(2020, 12, 16))
INDEX_STRIKES = (0.8, 0.9, 1.0, 1.1, 1.2)
FIXTURE_CALIBRATION_PATHS = 20000
FIXTURE_CALIBRATION_SEED = 3
FIXTURE_INDEX_PATHS = 50000
FIXTURE_INDEX_SEED = 11

AUTOCALL_DATES = tuple(date(2020, m, d) for m, d in
                     ((1, 17), (2, 17), (3, 17), (4, 17), (5, 19), (6, 18), (7, 17), (8, 17), (9, 16)))
AUTOCALL_BARRIERS = (1.1, 1.1, 1.075, 1.075, 1.075, 1.025, 0.95, 0.85, 0.7)
AUTOCALL_STRIKES = (1.0, 1.0, 0.975, 0.95, 0.925, 0.875, 0.775, 0.675, 0.5)
REFERENCE_MICRO = {"a": 0.338619, "beta": 0.172338, "chi": 1.4, "rho": 0.40985}
REFERENCE_MACRO = {"theta": 0.069918, "chi": 0.01277, "rho": 1.0, "v0": 0.0637628}


def option_expiry(maturity: date, calendar: RollCalendar) -> date:
    """Options expire three business days before the futures."""
    d = maturity
    for _ in range(OPTION_EXPIRY_LAG):
        d = calendar.previous_business_day(d)
    return d


def futures_curve(n: int = len(MATURITIES)) -> FuturesCurve:
    """Backwardated curve starting near 60."""
    mats = MATURITIES[:n]
    t = np.array([year_fraction(REFERENCE_DATE, T) for T in mats])
    prices = 54.0 + 6.5 * np.exp(-0.9 * t)
    return FuturesCurve(REFERENCE_DATE, mats, tuple(round(float(p), 4) for p in prices))


def discount_curve() -> DiscountCurve:
    pillars = [REFERENCE_DATE, date(2020, 6, 16), date(2020, 12, 16), date(2021, 12, 16), date(2024, 12, 16)]
    dfs = [round(math.exp(-RATE * year_fraction(REFERENCE_DATE, d)), 10) for d in pillars]
    return DiscountCurve(REFERENCE_DATE, tuple(pillars), tuple(dfs))


def spot_local_vol(expiry_times, config: GridConfig = GridConfig()) -> LocalVolGrid:
    """Smiled spot-factor local vol with a mildly decreasing term structure."""
    k = config.k_nodes()
    t = np.asarray(expiry_times, dtype=float)
    level = 0.30 + 0.06 * np.exp(-2.0 * t)
    m = k - 1.0
    rows = level[:, None] + 0.25 * m[None, :] ** 2 - 0.08 * m[None, :]
    return LocalVolGrid(t, k, rows)


def synthetic_market(n_maturities: int = len(MATURITIES), a: float = TRUE_MEAN_REVERSION,
                     calendar: RollCalendar | None = None, config: GridConfig = GridConfig()):
    """Market snapshot with futures vols generated from :func:`spot_local_vol`.

    Returns
    -------
    (MarketSnapshot, LocalVolGrid)
        The market and the local volatility that generated its futures vols.
    """
    calendar = calendar or RollCalendar()
    curve = futures_curve(n_maturities)
    disc = discount_curve()
    expiries = {T: option_expiry(T, calendar) for T in curve.maturities}
    lv = spot_local_vol(sorted(year_fraction(REFERENCE_DATE, e) for e in expiries.values()), config)
    surfaces = synthetic_futures_surfaces(lv, a, curve, disc, expiries, MONEYNESS, config)
    rounded = {T: _round_surface(s) for T, s in surfaces.items()}
    return MarketSnapshot(REFERENCE_DATE, curve, disc, rounded, None, calendar, 1.0), lv


def _round_surface(s):
    quotes = tuple(VolQuote(q.expiry, round(q.strike, 6), round(q.vol, 8)) for q in s.quotes)
    return VolSurface(s.underlier, s.reference_date, quotes)


def fixture_contracts() -> dict:
    """Contracts shipped with the package, keyed by file stem."""
    from .contracts import AthenaSpec, AutocallableSpec, KnockInSpec
    out = {f"autocall_{style}": AutocallableSpec(AUTOCALL_DATES, AUTOCALL_BARRIERS, AUTOCALL_STRIKES, 0.005, style)
           for style in ("bullet", "snowball", "digital")}
    out["athena"] = AthenaSpec(date(2020, 6, 16), date(2020, 12, 16))
    out["knockin"] = KnockInSpec(REFERENCE_DATE, date(2020, 12, 16), barrier=0.7, strike=1.0)
    return out


def write_fixtures(directory, calibration_paths: int = FIXTURE_CALIBRATION_PATHS,
                   index_paths: int = FIXTURE_INDEX_PATHS) -> dict:
    """Write the synthetic market CSVs, the contract JSON files and the parameter sets.

    The index smile is implied from a micro model with :data:`TRUE_MICRO`
    calibrated to the synthetic futures smiles.
    """
    import json
    from pathlib import Path

    from .contracts import save_contract
    from .mc_engine import MicroParams
    from .model_calibration import MCConfig, build_micro_model, micro_index_surface

    directory = Path(directory)
    market, _ = synthetic_market()
    mc = MCConfig(n_paths=calibration_paths, seed=FIXTURE_CALIBRATION_SEED)
    model = build_micro_model(market, MicroParams(**TRUE_MICRO), max(INDEX_EXPIRIES), mc)
    target = micro_index_surface(model, INDEX_EXPIRIES, INDEX_STRIKES, n_paths=index_paths,
                                 seed=FIXTURE_INDEX_SEED)
    index_vols = VolSurface(target.surface().underlier, REFERENCE_DATE,
                            tuple(VolQuote(q.expiry, q.strike, round(q.vol, 8)) for q in target.quotes))
    paths = write_market(market.with_index_vols(index_vols), directory / "market")
    (directory / "contracts").mkdir(parents=True, exist_ok=True)
    for name, spec in fixture_contracts().items():
        p = directory / "contracts" / f"{name}.json"
        save_contract(spec, p)
        paths[name] = p
    params = {"true_micro": TRUE_MICRO, "reference_micro": REFERENCE_MICRO, "reference_macro": REFERENCE_MACRO}
    for name, obj in params.items():
        p = directory / f"{name}.json"
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        paths[name] = p
    return paths
