"""Local volatility calibration for the spot factor and the index, and leverage surfaces.

Futures prices in the local-volatility layer are driven by one normalized
spot factor ``s`` mean reverting to 1::

    F(t, T) = F0(T) * (1 - (1 - s_t) * exp(-a (T - t)))

so a futures call with strike ``K`` expiring at ``t`` is
``df(t) * F0(T) * exp(-a (T - t)) * c(t, k)`` with the effective strike
``k = 1 - exp(a (T - t)) * (1 - K / F0(T))`` and ``c`` solved by
:func:`pde_solver.solve_extended_dupire`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .market_data import (
    DiscountCurve,
    FuturesCurve,
    MarketSnapshot,
    VolSurface,
    black76_call,
    black76_vega,
    implied_vol_array,
    year_fraction,
)
from .pde_solver import GridConfig, LocalVolGrid, solve_dupire_index, solve_extended_dupire

log = logging.getLogger(__name__)

LV_FLOOR = 1e-8
VARIANCE_FLOOR = 1e-8


class CalibrationError(RuntimeError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


def effective_strike(t, T, K, a: float, F0: float):
    """Strike on the spot-factor grid equivalent to futures strike ``K``."""
    return 1.0 - np.exp(a * (np.asarray(T) - np.asarray(t))) * (1.0 - np.asarray(K) / F0)


def futures_localvol(t: float, T: float, K, lv_spot: LocalVolGrid, a: float, F0: float,
                     counter: dict | None = None):
    """Absolute (normal) local vol of the futures with maturity ``T`` at price ``K``.

    ``(K - F0 (1 - e^{-a(T-t)})) * Ls(t, k(t, T, K))``, floored at ``LV_FLOOR``.
    """
    K = np.asarray(K, dtype=float)
    tau = max(T - t, 0.0)
    k = effective_strike(t, T, K, a, F0)
    if counter is not None:
        outside = int(np.count_nonzero((k < lv_spot.k[0]) | (k > lv_spot.k[-1])))
        counter["lv_extrapolated"] = counter.get("lv_extrapolated", 0) + outside
    out = (K - F0 * (1.0 - math.exp(-a * tau))) * lv_spot(t, k)
    return np.maximum(out, LV_FLOOR)


# ---------------------------------------------------------------------------
# Quotes mapped onto the normalized grid
# ---------------------------------------------------------------------------

@dataclass
class _Quotes:
    label: list
    t: np.ndarray          # expiry (year fraction)
    k: np.ndarray          # normalized strike
    scale: np.ndarray      # price = scale * c(t, k)
    F: np.ndarray          # Black-76 forward of the quote
    K: np.ndarray
    df: np.ndarray
    vol: np.ndarray        # target
    init: np.ndarray       # initial local vol guess at the node

    def __len__(self):
        return len(self.t)


def _futures_quotes(curve: FuturesCurve, discount: DiscountCurve, surfaces: dict, a: float) -> _Quotes:
    rows = []
    ref = curve.reference_date
    for T, surf in sorted(surfaces.items()):
        F0 = curve.price(T)
        TT = year_fraction(ref, T)
        for q in surf.quotes:
            t = year_fraction(ref, q.expiry)
            tau = TT - t
            k = float(effective_strike(t, TT, q.strike, a, F0))
            scale = discount.df(q.expiry) * F0 * math.exp(-a * tau)
            if a > 0:
                damp = (math.exp(-2 * a * tau) - math.exp(-2 * a * TT)) / (2 * a * t)
            else:
                damp = 1.0
            rows.append(((T, q.expiry, q.strike), t, k, scale, F0, q.strike, discount.df(q.expiry), q.vol,
                         q.vol / math.sqrt(damp)))
    return _pack(rows)


def _index_quotes(surface: VolSurface, discount: DiscountCurve, I0: float) -> _Quotes:
    ref = surface.reference_date
    rows = []
    for q in surface.quotes:
        df = discount.df(q.expiry)
        rows.append(((q.expiry, q.strike), year_fraction(ref, q.expiry), q.strike / I0, df * I0, I0, q.strike,
                     df, q.vol, q.vol))
    return _pack(rows)


def _pack(rows) -> _Quotes:
    if not rows:
        raise CalibrationError("no quotes to calibrate")
    cols = list(zip(*rows))
    return _Quotes(list(cols[0]), *(np.array(c, dtype=float) for c in cols[1:]))


@dataclass
class LVCalibConfig:
    tol: float = 1e-4
    max_iter: int = 50
    grid: GridConfig = field(default_factory=GridConfig)
    vega_floor: float = 1e-8
    raise_on_failure: bool = True


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    history: list
    residuals: dict
    skipped: list

    @property
    def max_residual(self) -> float:
        vals = [abs(r) for r in self.residuals.values() if np.isfinite(r)]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_residual": self.max_residual,
            "history": list(map(float, self.history)),
            "residuals": [{"quote": [str(x) for x in key], "residual": float(r)} for key, r in self.residuals.items()],
            "skipped": [[str(x) for x in key] for key in self.skipped],
        }


def _model_vols(grid_solution, q: _Quotes) -> np.ndarray:
    prices = np.empty(len(q))
    for t in np.unique(q.t):
        sel = q.t == t
        prices[sel] = q.scale[sel] * grid_solution.price(t, q.k[sel])
    return implied_vol_array(prices, q.F, q.K, q.t, q.df)


def _fixed_point(q: _Quotes, solve, config: LVCalibConfig, initial: LocalVolGrid | None) -> tuple:
    kgrid = config.grid.k_nodes()
    slices = np.unique(q.t)
    inside = (q.k > kgrid[0]) & (q.k < kgrid[-1])
    vega = black76_vega(q.F, q.K, q.vol, q.t, q.df) / np.maximum(q.scale, 1e-300)
    active = inside & (vega > config.vega_floor)
    skipped = [q.label[i] for i in np.flatnonzero(~active)]
    if skipped:
        log.warning("skipping %d quotes outside the grid or below the vega floor", len(skipped))
    if not active.any():
        raise CalibrationError("no calibratable quotes")

    def spread(node_values, default):
        rows = []
        for j, t in enumerate(slices):
            sel = active & (q.t == t)
            if not sel.any():
                rows.append(np.full_like(kgrid, default if np.isscalar(default) else default[j]))
                continue
            ks, vs = q.k[sel], node_values[sel]
            order = np.argsort(ks)
            ks, vs = ks[order], vs[order]
            uk, inv = np.unique(ks, return_inverse=True)
            uv = np.bincount(inv, weights=vs) / np.bincount(inv)
            rows.append(np.interp(kgrid, uk, uv))
        return np.array(rows)

    if initial is None:
        lv = LocalVolGrid(slices, kgrid, spread(q.init, float(np.median(q.init[active]))))
    else:
        lv = LocalVolGrid(slices, kgrid, np.array([initial(t, kgrid) for t in slices]))
    history = []
    sigma = None
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        sol = solve(lv, slices, config.grid)
        sigma = _model_vols(sol, q)
        resid = sigma - q.vol
        err = np.where(np.isfinite(resid), np.abs(resid), np.inf)[active]
        history.append(float(err.max()))
        if history[-1] <= config.tol:
            converged = True
            break
        ratio = np.where(np.isfinite(sigma) & (sigma > 0), q.vol / np.where(sigma > 0, sigma, 1.0), 1.0)
        ratio = np.clip(ratio, 0.5, 2.0)
        factor = spread(np.where(active, ratio, 1.0), 1.0)
        lv = LocalVolGrid(slices, kgrid, lv.values * factor)
    residuals = {q.label[i]: float(sigma[i] - q.vol[i]) for i in np.flatnonzero(active)}
    report = ConvergenceReport(converged, it, history, residuals, skipped)
    if not converged and config.raise_on_failure:
        raise CalibrationError(f"local vol calibration not converged after {it} iterations "
                               f"(max residual {history[-1]:.3g})", report)
    return lv, report


def calibrate_spot_lv(market: MarketSnapshot | None = None, a: float = 0.0, *, curve: FuturesCurve | None = None,
                      discount: DiscountCurve | None = None, surfaces: dict | None = None,
                      config: LVCalibConfig | None = None, initial: LocalVolGrid | None = None):
    """Fixed-point calibration of the spot-factor local vol to futures vanillas.

    Each iteration solves the extended Dupire equation, reprices every quote,
    inverts to Black-76 vols and multiplies the local vol at each quote node
    by ``target / model`` (spread linearly in ``k`` within the expiry slice,
    flat outside the quoted strikes).

    Returns
    -------
    (LocalVolGrid, ConvergenceReport)
    """
    config = config or LVCalibConfig()
    if market is not None:
        curve, discount, surfaces = market.futures, market.discount, market.futures_vols
    if a < 0:
        raise ValueError("mean reversion speed must be non-negative")
    q = _futures_quotes(curve, discount, surfaces, a)
    return _fixed_point(q, lambda lv, ts, g: solve_extended_dupire(lv, a, ts, g), config, initial)


def calibrate_index_lv(surface: VolSurface, discount: DiscountCurve, index_level: float = 1.0,
                       config: LVCalibConfig | None = None, initial: LocalVolGrid | None = None):
    """Same fixed point as :func:`calibrate_spot_lv` on the driftless index Dupire equation."""
    config = config or LVCalibConfig()
    q = _index_quotes(surface, discount, index_level)
    return _fixed_point(q, lambda lv, ts, g: solve_dupire_index(lv, ts, g), config, initial)


def futures_option_prices(lv_spot: LocalVolGrid, a: float, curve: FuturesCurve, discount: DiscountCurve,
                          quotes, config: GridConfig = GridConfig()) -> np.ndarray:
    """Local-vol model prices for ``(maturity, expiry, strike)`` triples."""
    ref = curve.reference_date
    quotes = list(quotes)
    times = sorted({year_fraction(ref, e) for _, e, _ in quotes})
    sol = solve_extended_dupire(lv_spot, a, times, config)
    out = []
    for T, e, K in quotes:
        t, TT, F0 = year_fraction(ref, e), year_fraction(ref, T), curve.price(T)
        k = effective_strike(t, TT, K, a, F0)
        out.append(discount.df(e) * F0 * math.exp(-a * (TT - t)) * float(sol.price(t, k)))
    return np.array(out)


def index_option_prices(lv_index: LocalVolGrid, discount: DiscountCurve, index_level: float,
                        reference_date: date, quotes, config: GridConfig = GridConfig()) -> np.ndarray:
    quotes = list(quotes)
    times = sorted({year_fraction(reference_date, e) for e, _ in quotes})
    sol = solve_dupire_index(lv_index, times, config)
    return np.array([discount.df(e) * index_level * float(sol.price(year_fraction(reference_date, e), K / index_level))
                     for e, K in quotes])


def synthetic_futures_surfaces(lv_spot: LocalVolGrid, a: float, curve: FuturesCurve, discount: DiscountCurve,
                               expiries: dict, moneyness, config: GridConfig = GridConfig()) -> dict:
    """Vol surfaces generated by a known spot local vol (forward run of the model)."""
    from .market_data import VolQuote
    quotes = [(T, expiries[T], curve.price(T) * m) for T in expiries for m in moneyness]
    prices = futures_option_prices(lv_spot, a, curve, discount, quotes, config)
    ref = curve.reference_date
    out = {}
    for (T, e, K), p in zip(quotes, prices):
        vol = float(implied_vol_array(p, curve.price(T), K, year_fraction(ref, e), discount.df(e)))
        out.setdefault(T, []).append(VolQuote(e, K, vol))
    return {T: VolSurface(T, ref, tuple(qs)) for T, qs in out.items()}


# ---------------------------------------------------------------------------
# Leverage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeverageSurface:
    """Leverage ``L(t_m, x)`` frozen on a per-step price grid.

    ``grids[m]`` is the increasing price axis used from ``times[m]`` to the
    next step; values are interpolated linearly in price, flat outside.
    """

    times: np.ndarray
    grids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.grids.shape != self.values.shape or self.grids.shape[0] != len(self.times):
            raise ValueError("leverage grid shapes inconsistent")

    def at_step(self, m: int, x, counter: dict | None = None) -> np.ndarray:
        g = self.grids[m]
        if counter is not None:
            counter["leverage_extrapolated"] = counter.get("leverage_extrapolated", 0) + int(
                np.count_nonzero((x < g[0]) | (x > g[-1])))
        return np.interp(x, g, self.values[m])

    @classmethod
    def constant(cls, times, value: float = 1.0) -> "LeverageSurface":
        n = len(times)
        return cls(np.asarray(times, float), np.tile([-1e300, 1e300], (n, 1)), np.full((n, 2), float(value)))


def leverage_from_lv(local_vol, conditional_variance, counter: dict | None = None) -> np.ndarray:
    """``L = local_vol / sqrt(E[v | x])`` with the conditional variance floored."""
    cv = np.asarray(conditional_variance, dtype=float)
    low = cv <= VARIANCE_FLOOR
    if counter is not None:
        counter["variance_floored"] = counter.get("variance_floored", 0) + int(np.count_nonzero(low))
    return np.asarray(local_vol, dtype=float) / np.sqrt(np.where(low, VARIANCE_FLOOR, cv))
