"""Calibration of the micro (futures-curve) and macro (index) SLV models.

The micro model fits ``(a, beta, chi, rho)`` so that index vanillas priced
on the replicated index match market index vols in the l1 sense. The macro
model first fits a pure stochastic-volatility model semi-analytically to the
micro-generated index surface, then adds a leverage function so its
marginals match that surface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from typing import Sequence

import numpy as np

from .heston import PricingError, heston_calls
from .localvol_calib import (
    CalibrationError,
    LVCalibConfig,
    LeverageSurface,
    calibrate_index_lv,
    calibrate_spot_lv,
)
from .market_data import (
    INDEX,
    DiscountCurve,
    MarketSnapshot,
    RollCalendar,
    VolQuote,
    VolSurface,
    black76_vega,
    implied_vol_array,
    year_fraction,
)
from .mc_engine import MacroParams, MicroParams, PathBundle, SimulationError, simulate_macro, simulate_micro
from .optim import BoxDomain, OptimizerReport, hybrid_minimize
from .pde_solver import LocalVolGrid

log = logging.getLogger(__name__)

PENALTY_VOL = 1.0
A_QUANTUM = 1e-4

MICRO_FREE = ("a", "beta", "chi", "rho")
MACRO_FREE = ("theta", "chi", "rho", "v0")
DEFAULT_MICRO_BOUNDS = {"a": (0.01, 2.0), "beta": (0.01, 2.0), "chi": (0.01, 1.4), "rho": (-1.0, 1.0)}
DEFAULT_MACRO_BOUNDS = {"theta": (1e-4, 1.0), "chi": (0.01, 1.4), "rho": (-1.0, 1.0), "v0": (1e-4, 1.0)}


@dataclass(frozen=True)
class CalibrationTarget:
    """Index vanilla quotes ``(expiry, strike, vol)`` with an optional MC standard error per quote."""

    reference_date: date
    quotes: tuple
    source: str = "market"
    index_level: float = 1.0
    std_errors: tuple | None = None

    def __post_init__(self):
        if not self.quotes:
            raise ValueError("calibration target has no quotes")
        if any(not (q.vol > 0) for q in self.quotes):
            raise ValueError("target vols must be positive")
        if self.source not in ("market", "micro"):
            raise ValueError(f"unknown target source {self.source!r}")

    def __len__(self):
        return len(self.quotes)

    @classmethod
    def from_surface(cls, surface: VolSurface, index_level: float = 1.0, source: str = "market"):
        return cls(surface.reference_date, tuple(surface.quotes), source, index_level)

    def surface(self) -> VolSurface:
        return VolSurface(INDEX, self.reference_date, tuple(self.quotes))

    def expiries(self) -> list[date]:
        return sorted({q.expiry for q in self.quotes})

    def arrays(self, discount: DiscountCurve):
        T = np.array([year_fraction(self.reference_date, q.expiry) for q in self.quotes])
        K = np.array([q.strike for q in self.quotes])
        vol = np.array([q.vol for q in self.quotes])
        df = np.array([discount.df(q.expiry) for q in self.quotes])
        return T, K, vol, df

    def bumped(self, shift: float, expiry: date | None = None) -> "CalibrationTarget":
        quotes = tuple(VolQuote(q.expiry, q.strike, q.vol + shift) if expiry in (None, q.expiry) else q
                       for q in self.quotes)
        return replace(self, quotes=quotes)


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 20000
    seed: int = 1
    n_threads: int = 1
    cross: str = "auto"


# ---------------------------------------------------------------------------
# Micro model
# ---------------------------------------------------------------------------

@dataclass
class MicroModel:
    market: MarketSnapshot
    params: MicroParams
    lv_spot: LocalVolGrid
    leverage: list
    horizon: date
    lv_report: object = None
    calibration_run: PathBundle | None = None
    mc: MCConfig = field(default_factory=MCConfig)
    lv_config: LVCalibConfig | None = None

    def rebuilt(self, market: MarketSnapshot) -> "MicroModel":
        """Same parameters and calibration settings on another market (spot LV and leverage recalibrated)."""
        return build_micro_model(market, self.params, self.horizon, self.mc, lv_config=self.lv_config)

    def simulate(self, n_paths: int, seed: int, store_dates: Sequence[date] = (), store_futures: bool = False,
                 n_threads: int = 1, curve=None, index_level: float | None = None,
                 cross: str = "auto") -> PathBundle:
        """Pricing run with the frozen leverage (optionally on a bumped curve / index level)."""
        return simulate_micro(self.params, curve or self.market.futures, self.market.calendar, self.horizon,
                              n_paths, seed, leverage=self.leverage,
                              index_level=self.market.index_level if index_level is None else index_level,
                              store_dates=store_dates, store_futures=store_futures, n_threads=n_threads,
                              cross=cross)


class SpotLVCache:
    """Calibrated spot local vol per mean-reversion speed quantized to ``1e-4``."""

    def __init__(self, market: MarketSnapshot, config: LVCalibConfig | None = None):
        self.market = market
        self.config = config or LVCalibConfig()
        self._store: dict = {}

    @staticmethod
    def quantize(a: float) -> float:
        return round(round(a / A_QUANTUM) * A_QUANTUM, 10)

    def get(self, a: float):
        key = self.quantize(a)
        if key not in self._store:
            self._store[key] = calibrate_spot_lv(self.market, key, config=self.config)
        return self._store[key]


def build_micro_model(market: MarketSnapshot, params: MicroParams, horizon: date, mc: MCConfig = MCConfig(),
                      store_dates: Sequence[date] = (), lv_cache: SpotLVCache | None = None,
                      lv_config: LVCalibConfig | None = None) -> MicroModel:
    """Calibrate the spot local vol for ``params.a`` and the leverage by a particle run."""
    cache = lv_cache or SpotLVCache(market, lv_config)
    a = cache.quantize(params.a)
    params = replace(params, a=a)
    lv, report = cache.get(a)
    run = simulate_micro(params, market.futures, market.calendar, horizon, mc.n_paths, mc.seed, lv_spot=lv,
                         index_level=market.index_level, store_dates=store_dates, n_threads=mc.n_threads,
                         cross=mc.cross)
    return MicroModel(market, params, lv, run.leverage, horizon, report, run, mc, cache.config)


def index_vanilla_prices(bundle: PathBundle, expiries, strikes, discount: DiscountCurve):
    """Discounted MC call prices and standard errors on the index."""
    prices, ses = [], []
    for e, K in zip(expiries, strikes):
        pay = discount.df(e) * np.maximum(bundle.index_at(e) - K, 0.0)
        prices.append(pay.mean())
        ses.append(pay.std(ddof=1) / math.sqrt(len(pay)))
    return np.array(prices), np.array(ses)


def _model_vols(bundle: PathBundle, target: CalibrationTarget, discount: DiscountCurve):
    T, K, _, df = target.arrays(discount)
    exps = [q.expiry for q in target.quotes]
    prices, ses = index_vanilla_prices(bundle, exps, K, discount)
    vols = implied_vol_array(prices, bundle.index_level, K, T, df)
    return vols, prices, ses


def l1_distance(model_vols: np.ndarray, target_vols: np.ndarray) -> float:
    diff = np.abs(np.asarray(model_vols) - np.asarray(target_vols))
    return float(np.where(np.isfinite(diff), diff, PENALTY_VOL).sum())


def micro_params_from_vector(x, fixed: MicroParams | None = None) -> MicroParams:
    base = fixed or MicroParams(a=0.1, beta=0.1, chi=0.1, rho=0.0)
    return replace(base, **dict(zip(MICRO_FREE, map(float, x))))


def micro_objective(params: MicroParams, market: MarketSnapshot, target: CalibrationTarget, mc: MCConfig = MCConfig(),
                    lv_cache: SpotLVCache | None = None, diagnostics: dict | None = None) -> float:
    """l1 distance between target index vols and micro-model index vols.

    The spot local vol is recalibrated for ``params.a`` (cached), the
    leverage is estimated in a particle run with the fixed seed of ``mc``
    and index vanillas are priced on that run's paths. Quotes whose price
    cannot be inverted cost ``PENALTY_VOL`` each; failures give ``inf``.
    """
    if not target.quotes:
        return 0.0
    exps = target.expiries()
    try:
        model = build_micro_model(market, params, max(exps), mc, store_dates=exps, lv_cache=lv_cache)
    except (CalibrationError, SimulationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        if diagnostics is not None:
            diagnostics.setdefault("failures", []).append(str(exc))
        log.warning("micro objective failed at %s: %s", params, exc)
        return math.inf
    vols, _, _ = _model_vols(model.calibration_run, target, market.discount)
    return l1_distance(vols, [q.vol for q in target.quotes])


@dataclass
class CalibrationReport:
    params: dict
    objective: float
    optimizer: OptimizerReport | None
    residuals: list
    at_bound: list
    feller: bool
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "objective": self.objective,
            "at_bound": self.at_bound,
            "feller": self.feller,
            "warnings": self.warnings,
            "optimizer": self.optimizer.to_dict() if self.optimizer else None,
            "residuals": self.residuals,
        }


def _domain(bounds: dict, names) -> BoxDomain:
    return BoxDomain([bounds[n][0] for n in names], [bounds[n][1] for n in names])


def _optimize(f, domain: BoxDomain, seed: int, global_budget: int, local_budget: int, np_: int, no: int,
              map_fn=None) -> OptimizerReport:
    if np.all(domain.width == 0):
        x = domain.lower.copy()
        v = f(x)
        return OptimizerReport(x, float(v) if np.isfinite(v) else math.inf, 1, "degenerate domain",
                               [{"phase": "degenerate", "nfev": 1, "fun": float(v)}])
    return hybrid_minimize(f, domain, seed=seed, global_budget=global_budget, local_budget=local_budget,
                           np_=np_, no=no, map_fn=map_fn)


def _residual_rows(target: CalibrationTarget, vols) -> list:
    return [{"expiry": q.expiry.isoformat(), "strike": q.strike, "target": q.vol,
             "model": float(v) if np.isfinite(v) else None,
             "residual": float(v - q.vol) if np.isfinite(v) else None}
            for q, v in zip(target.quotes, vols)]


def calibrate_micro(market: MarketSnapshot, target: CalibrationTarget, bounds: dict | None = None,
                    seed: int = 0, mc: MCConfig = MCConfig(), global_budget: int = 400, local_budget: int = 200,
                    np_: int = 40, no: int = 60, fixed: MicroParams | None = None,
                    residual_threshold: float = 0.005, lv_config: LVCalibConfig | None = None):
    """Hybrid optimization of ``(a, beta, chi, rho)`` against index vols.

    ``kappa``, ``theta`` and ``v0`` stay at the values of ``fixed``
    (default 1). Returns ``(MicroModel, CalibrationReport)``.
    """
    bounds = {**DEFAULT_MICRO_BOUNDS, **(bounds or {})}
    fixed = fixed or MicroParams(a=0.1, beta=0.1, chi=0.1, rho=0.0)
    domain = _domain(bounds, MICRO_FREE)
    cache = SpotLVCache(market, lv_config)

    def f(x):
        return micro_objective(micro_params_from_vector(x, fixed), market, target, mc, cache)

    opt = _optimize(f, domain, seed, global_budget, local_budget, np_, no)
    params = micro_params_from_vector(opt.x, fixed)
    exps = target.expiries()
    model = build_micro_model(market, params, max(exps), mc, store_dates=exps, lv_cache=cache)
    vols, _, _ = _model_vols(model.calibration_run, target, market.discount)
    warnings = []
    worst = float(np.nanmax(np.abs(vols - [q.vol for q in target.quotes]))) if len(vols) else 0.0
    if worst > residual_threshold:
        warnings.append(f"max index vol residual {worst:.4f} above {residual_threshold}")
    report = CalibrationReport(
        params=asdict(model.params), objective=opt.fun, optimizer=opt, residuals=_residual_rows(target, vols),
        at_bound=[n for n, b in zip(MICRO_FREE, domain.at_bound(opt.x)) if b], feller=model.params.feller(),
        warnings=warnings,
    )
    return model, report


def micro_index_surface(model: MicroModel, expiries: Sequence[date], strikes: Sequence[float],
                        n_paths: int | None = None, seed: int | None = None, bundle: PathBundle | None = None
                        ) -> CalibrationTarget:
    """Index vols implied by the micro model, with MC standard errors in vol.

    Quotes whose MC price falls outside the no-arbitrage bounds are dropped.
    """
    market = model.market
    expiries = sorted(set(expiries))
    if bundle is None:
        run = model.calibration_run
        if n_paths is None and run is not None and all(e in run.store_dates for e in expiries):
            bundle = run
        else:
            bundle = model.simulate(n_paths or 20000, 1 if seed is None else seed, store_dates=expiries)
    quotes, ses = [], []
    I0 = bundle.index_level
    for e in expiries:
        T = year_fraction(market.reference_date, e)
        df = market.discount.df(e)
        Ks = np.asarray(strikes, dtype=float)
        prices, pse = index_vanilla_prices(bundle, [e] * len(Ks), Ks, market.discount)
        vols = implied_vol_array(prices, I0, Ks, T, df)
        for K, v, s in zip(Ks, vols, pse):
            if not (np.isfinite(v) and v > 0):
                log.warning("dropping index quote %s K=%s: price outside no-arbitrage bounds", e, K)
                continue
            vega = float(black76_vega(I0, K, v, T, df))
            quotes.append(VolQuote(e, float(K), float(v)))
            ses.append(s / vega if vega > 0 else math.inf)
    if not quotes:
        raise CalibrationError("micro model produced no invertible index quotes")
    return CalibrationTarget(market.reference_date, tuple(quotes), "micro", I0, tuple(ses))


# ---------------------------------------------------------------------------
# Macro model
# ---------------------------------------------------------------------------

@dataclass
class MacroModel:
    params: MacroParams
    lv_index: LocalVolGrid
    leverage: LeverageSurface
    reference_date: date
    calendar: RollCalendar
    horizon: date
    index_level: float
    discount: DiscountCurve
    substeps: int = 1
    lv_report: object = None
    calibration_run: PathBundle | None = None
    settings: dict = field(default_factory=dict)

    def simulate(self, n_paths: int, seed: int, store_dates: Sequence[date] = (), n_threads: int = 1,
                 index_level: float | None = None) -> PathBundle:
        return simulate_macro(self.params, self.reference_date, self.calendar, self.horizon, n_paths, seed,
                              leverage=self.leverage,
                              index_level=self.index_level if index_level is None else index_level,
                              store_dates=store_dates, n_threads=n_threads, substeps=self.substeps)


def macro_params_from_vector(x, kappa: float = 1.0) -> MacroParams:
    return MacroParams(**dict(zip(MACRO_FREE, map(float, x))), kappa=kappa)


def sv_model_vols(params: MacroParams, target: CalibrationTarget, discount: DiscountCurve) -> np.ndarray:
    T, K, _, df = target.arrays(discount)
    I0 = target.index_level
    prices = np.empty(len(K))
    for t in np.unique(T):
        m = T == t
        prices[m] = heston_calls(I0, K[m], t, params.kappa, params.theta, params.chi, params.rho, params.v0,
                                 df[m][0])
    return implied_vol_array(prices, I0, K, T, df)


def macro_sv_objective(params: MacroParams, target: CalibrationTarget, discount: DiscountCurve,
                       diagnostics: dict | None = None) -> float:
    """l1 distance between target vols and the semi-analytic pure-SV vols."""
    try:
        vols = sv_model_vols(params, target, discount)
    except (PricingError, FloatingPointError, ZeroDivisionError) as exc:
        if diagnostics is not None:
            diagnostics.setdefault("failures", []).append(str(exc))
        return math.inf
    return l1_distance(vols, [q.vol for q in target.quotes])


def calibrate_macro(target: CalibrationTarget, discount: DiscountCurve, calendar: RollCalendar,
                    horizon: date | None = None, bounds: dict | None = None, seed: int = 0,
                    mc: MCConfig = MCConfig(), global_budget: int = 1000, local_budget: int = 500,
                    np_: int = 40, no: int = 60, kappa: float = 1.0, substeps: int = 1,
                    lv_config: LVCalibConfig | None = None, fixed_params: MacroParams | None = None):
    """Pure-SV fit, index local vol and particle leverage for the macro model.

    Returns ``(MacroModel, CalibrationReport)``. With ``fixed_params`` the
    stochastic parameters are taken as given and only the leverage is built.
    """
    bounds = {**DEFAULT_MACRO_BOUNDS, **(bounds or {})}
    domain = _domain(bounds, MACRO_FREE)
    if fixed_params is None:
        opt = _optimize(lambda x: macro_sv_objective(macro_params_from_vector(x, kappa), target, discount),
                        domain, seed, global_budget, local_budget, np_, no)
        params = macro_params_from_vector(opt.x, kappa)
        at_bound = [n for n, b in zip(MACRO_FREE, domain.at_bound(opt.x)) if b]
        objective = opt.fun
    else:
        opt, params, at_bound = None, fixed_params, []
        objective = macro_sv_objective(params, target, discount)
    lv_config = lv_config or LVCalibConfig()
    lv, lv_report = calibrate_index_lv(target.surface(), discount, target.index_level, lv_config)
    exps = target.expiries()
    horizon = max([horizon or exps[-1], exps[-1]])
    run = simulate_macro(params, target.reference_date, calendar, horizon, mc.n_paths, mc.seed, lv_index=lv,
                         index_level=target.index_level, store_dates=exps, n_threads=mc.n_threads,
                         substeps=substeps)
    settings = dict(horizon=horizon, bounds=bounds, seed=seed, mc=mc, global_budget=global_budget,
                    local_budget=local_budget, np_=np_, no=no, kappa=kappa, substeps=substeps, lv_config=lv_config)
    model = MacroModel(params, lv, run.leverage, target.reference_date, calendar, horizon, target.index_level,
                       discount, substeps, lv_report, run, settings)
    vols, _, _ = _model_vols(run, target, discount)
    report = CalibrationReport(
        params=asdict(params), objective=objective, optimizer=opt, residuals=_residual_rows(target, vols),
        at_bound=at_bound, feller=params.feller(),
        warnings=[] if params.feller() else ["Feller condition violated"],
    )
    return model, report


def macro_vanilla_vols(model: MacroModel, target: CalibrationTarget, n_paths: int, seed: int):
    """Implied vols of macro-model index vanillas at the target quotes (pricing run)."""
    bundle = model.simulate(n_paths, seed, store_dates=target.expiries())
    return _model_vols(bundle, target, model.discount)
