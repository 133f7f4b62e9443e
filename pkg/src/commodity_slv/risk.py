"""Bump-and-reprice sensitivities under common random numbers.

Deltas reuse the calibrated leverage; vegas recalibrate the local vol and
the leverage on the bumped smile with the same calibration seed. Standard
errors come from the pathwise differences of the base and bumped runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date

import numpy as np

from .contracts import DifferenceReport, mc_estimate, model_difference_ratio, pathwise_values, with_reference_level
from .index_engine import bumped_index_level, index_sensitivity
from .model_calibration import CalibrationTarget, MacroModel, MicroModel, calibrate_macro, micro_index_surface

DELTA_BUMP = 1e-7
LARGE_DELTA_BUMP = 1e-4
VEGA_BUMP = 0.01


@dataclass(frozen=True)
class Sensitivity:
    scenario: str
    value: float
    std_error: float
    bump: float
    base: float
    bumped: float
    method: str = "forward"

    def to_row(self) -> dict:
        return {"scenario": self.scenario, "value": self.value, "std_error": self.std_error, "bump": self.bump,
                "method": self.method}


def _difference(up: np.ndarray, down: np.ndarray, scale: float):
    d = (up - down) / scale
    n = len(d)
    se = float(np.std(d, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.sum(d) / n), se


def _required(contract, calendar):
    return sorted(set(contract.required_dates(calendar)))


# ---------------------------------------------------------------------------
# Micro
# ---------------------------------------------------------------------------

def _micro_values(model: MicroModel, contract, n_paths: int, seed: int, rel_bump: float, maturity: date | None,
                  n_threads: int = 1) -> np.ndarray:
    market = model.market
    curve = market.futures
    level = market.index_level
    if maturity is not None and rel_bump != 0.0:
        bumped = curve.bumped(maturity, rel_bump)
        level = bumped_index_level(market.reference_date, curve, bumped, level, market.calendar)
        curve = bumped
    spec = with_reference_level(contract, market.index_level) if contract.underlier == "INDEX" else contract
    dates = _required(contract, market.calendar)
    bundle = model.simulate(n_paths, seed, store_dates=dates, store_futures=contract.underlier != "INDEX",
                            curve=curve, index_level=level, n_threads=n_threads)
    return pathwise_values(spec, bundle, market.discount, market.calendar)


def delta_futures(model: MicroModel, contract, maturity: date, n_paths: int, seed: int, bump: float = DELTA_BUMP,
                  central: bool = False, n_threads: int = 1) -> Sensitivity:
    """``[V((1+h) F_i) - V(F_i)] / (h F_i)``; the index level moves with the replicating portfolio.

    ``central=True`` uses ``(V(+h) - V(-h)) / (2 h F_i)`` instead.
    """
    if bump == 0:
        raise ValueError("bump must be non-zero")
    F = model.market.futures.price(maturity)
    up = _micro_values(model, contract, n_paths, seed, bump, maturity, n_threads)
    if central:
        down = _micro_values(model, contract, n_paths, seed, -bump, maturity, n_threads)
        value, se = _difference(up, down, 2 * bump * F)
    else:
        down = _micro_values(model, contract, n_paths, seed, 0.0, None, n_threads)
        value, se = _difference(up, down, bump * F)
    return Sensitivity(f"delta_F[{maturity.isoformat()}]", value, se, bump, float(down.mean()), float(up.mean()),
                       "central" if central else "forward")


def index_futures_derivative(model: MicroModel, maturity: date | None = None) -> float:
    """``dI/dF(T)`` on the reference date from the replicating portfolio (``alpha Q`` or ``(1-alpha) Q``)."""
    market = model.market
    sens = index_sensitivity(market.reference_date, market.futures, market.index_level, market.calendar)
    if maturity is None:
        maturity = market.futures.maturities[0]
    return float(sens.get(maturity, 0.0))


def delta_index_from_micro(delta_f1: float, dI_dF1: float, delta_f1_se: float = 0.0) -> tuple[float, float]:
    """Index delta of the micro model: ``Delta^F_1 / (dI/dF_1)``."""
    if dI_dF1 == 0:
        raise ZeroDivisionError("index does not depend on the first futures at the reference date")
    return delta_f1 / dI_dF1, abs(delta_f1_se / dI_dF1)


def vega_futures(model: MicroModel, contract, maturity: date, n_paths: int, seed: int, shift: float = VEGA_BUMP,
                 n_threads: int = 1) -> Sensitivity:
    """Smile of ``maturity`` shifted by ``shift``; spot local vol and leverage recalibrated."""
    bumped_market = model.market.bump_futures_vols(shift, maturity)
    bumped_model = model.rebuilt(bumped_market)
    base = _micro_values(model, contract, n_paths, seed, 0.0, None, n_threads)
    up = _micro_values(bumped_model, contract, n_paths, seed, 0.0, None, n_threads)
    value, se = _difference(up, base, shift)
    return Sensitivity(f"vega_F[{maturity.isoformat()}]", value, se, shift, float(base.mean()), float(up.mean()))


# ---------------------------------------------------------------------------
# Macro
# ---------------------------------------------------------------------------

def _macro_values(model: MacroModel, contract, n_paths: int, seed: int, level: float | None = None,
                  n_threads: int = 1) -> np.ndarray:
    spec = with_reference_level(contract, model.index_level)
    bundle = model.simulate(n_paths, seed, store_dates=_required(contract, model.calendar), n_threads=n_threads,
                            index_level=level)
    return pathwise_values(spec, bundle, model.discount, model.calendar)


def delta_index_macro(model: MacroModel, contract, n_paths: int, seed: int, bump: float = DELTA_BUMP,
                      central: bool = False, n_threads: int = 1) -> Sensitivity:
    I0 = model.index_level
    up = _macro_values(model, contract, n_paths, seed, I0 * (1 + bump), n_threads)
    if central:
        down = _macro_values(model, contract, n_paths, seed, I0 * (1 - bump), n_threads)
        value, se = _difference(up, down, 2 * bump * I0)
    else:
        down = _macro_values(model, contract, n_paths, seed, None, n_threads)
        value, se = _difference(up, down, bump * I0)
    return Sensitivity("delta_I", value, se, bump, float(down.mean()), float(up.mean()),
                       "central" if central else "forward")


def vega_index_macro(model: MacroModel, target: CalibrationTarget, contract, expiry: date, n_paths: int, seed: int,
                     shift: float = VEGA_BUMP, refit_sv: bool = True, n_threads: int = 1) -> Sensitivity:
    """Target index smile at ``expiry`` shifted; macro model recalibrated with its original settings."""
    settings = dict(model.settings)
    if not refit_sv:
        settings["fixed_params"] = model.params
    bumped_model, _ = calibrate_macro(target.bumped(shift, expiry), model.discount, model.calendar, **settings)
    base = _macro_values(model, contract, n_paths, seed, None, n_threads)
    up = _macro_values(bumped_model, contract, n_paths, seed, None, n_threads)
    value, se = _difference(up, base, shift)
    return Sensitivity(f"vega_I[{expiry.isoformat()}]", value, se, shift, float(base.mean()), float(up.mean()))


# ---------------------------------------------------------------------------
# Micro vs macro
# ---------------------------------------------------------------------------

@dataclass
class ModelComparison:
    report: DifferenceReport
    macro: MacroModel
    macro_bumped: MacroModel
    target: CalibrationTarget
    target_bumped: CalibrationTarget


def compare_models(micro: MicroModel, contract, expiries, strikes, n_paths: int, seed: int,
                   macro_settings: dict | None = None, shift: float = VEGA_BUMP, target_paths: int | None = None,
                   target_seed: int | None = None, refit_sv: bool = False, n_threads: int = 1) -> ModelComparison:
    """Micro and macro prices of ``contract`` and their responses to a parallel futures-vol shift.

    The macro model is calibrated to the index smile generated by the micro
    model, before and after every futures smile is shifted by ``shift``.
    With ``refit_sv=False`` the bumped macro model keeps the stochastic
    parameters of the base fit and only its local vol and leverage move.
    All four prices use the pricing seed, so each difference is pathwise.
    """
    market = micro.market
    settings = dict(macro_settings or {})
    tp = target_paths or micro.mc.n_paths
    ts = micro.mc.seed if target_seed is None else target_seed
    micro_b = micro.rebuilt(market.bump_futures_vols(shift))
    target = micro_index_surface(micro, expiries, strikes, n_paths=tp, seed=ts)
    target_b = micro_index_surface(micro_b, expiries, strikes, n_paths=tp, seed=ts)
    macro, _ = calibrate_macro(target, market.discount, market.calendar, **settings)
    settings_b = dict(macro.settings)
    if not refit_sv:
        settings_b["fixed_params"] = macro.params
    macro_b, _ = calibrate_macro(target_b, market.discount, market.calendar, **settings_b)

    v_mi = _micro_values(micro, contract, n_paths, seed, 0.0, None, n_threads)
    v_mi_b = _micro_values(micro_b, contract, n_paths, seed, 0.0, None, n_threads)
    v_ma = _macro_values(macro, contract, n_paths, seed, None, n_threads)
    v_ma_b = _macro_values(macro_b, contract, n_paths, seed, None, n_threads)
    report = model_difference_ratio(mc_estimate(v_mi), mc_estimate(v_ma), mc_estimate(v_mi_b - v_mi),
                                    mc_estimate(v_ma_b - v_ma))
    return ModelComparison(report, macro, macro_b, target, target_b)
