import math
from dataclasses import replace
from datetime import date

import numpy as np
import pytest

from commodity_slv.market_data import DiscountCurve, FuturesCurve, VolQuote, year_fraction
from commodity_slv.mc_engine import MacroParams, MicroParams, simulate_macro, simulate_micro
from commodity_slv.localvol_calib import LeverageSurface
from commodity_slv.model_calibration import (
    CalibrationTarget,
    MCConfig,
    MicroModel,
    SpotLVCache,
    build_micro_model,
    calibrate_macro,
    calibrate_micro,
    l1_distance,
    macro_sv_objective,
    macro_vanilla_vols,
    micro_index_surface,
    micro_objective,
    sv_model_vols,
)
from commodity_slv.mc_engine import macro_step_times
from commodity_slv.pde_solver import LocalVolGrid
from commodity_slv.synthetic import MATURITIES, REFERENCE_DATE

REF = REFERENCE_DATE
EXPIRIES = (date(2020, 3, 16), date(2020, 4, 16))
STRIKES = (0.9, 1.0, 1.1)
MC = MCConfig(n_paths=6000, seed=3)
PARAMS = MicroParams(a=0.3, beta=0.5, chi=0.5, rho=-0.3)


def flat_target(vol, expiries=EXPIRIES, strikes=STRIKES):
    return CalibrationTarget(REF, tuple(VolQuote(e, k, vol) for e in expiries for k in strikes))


@pytest.fixture(scope="module")
def disc():
    return DiscountCurve.flat(REF, 0.02)


@pytest.fixture(scope="module")
def micro(small_market):
    market, _ = small_market
    return build_micro_model(market, PARAMS, EXPIRIES[-1], MC, store_dates=EXPIRIES)


class TestTarget:
    def test_validation(self):
        with pytest.raises(ValueError):
            CalibrationTarget(REF, ())
        with pytest.raises(ValueError):
            CalibrationTarget(REF, (VolQuote(EXPIRIES[0], 1.0, 0.0),))
        with pytest.raises(ValueError):
            CalibrationTarget(REF, (VolQuote(EXPIRIES[0], 1.0, 0.2),), source="broker")

    def test_bumped(self):
        t = flat_target(0.2)
        assert all(q.vol == pytest.approx(0.21) for q in t.bumped(0.01).quotes)
        b = t.bumped(0.01, EXPIRIES[0])
        assert [q.vol for q in b.quotes] == pytest.approx([0.21] * 3 + [0.2] * 3)

    def test_l1_penalty(self):
        assert l1_distance([0.2, np.nan], [0.25, 0.3]) == pytest.approx(1.05)


class TestMicroObjective:
    def test_self_target(self, small_market, micro):
        market, _ = small_market
        target = micro_index_surface(micro, EXPIRIES, STRIKES)
        assert micro_objective(PARAMS, market, target, MC) < 0.005 * len(target)

    def test_common_random_numbers(self, small_market):
        market, _ = small_market
        cache = SpotLVCache(market)
        t = flat_target(0.3)
        assert micro_objective(PARAMS, market, t, MC, cache) == micro_objective(PARAMS, market, t, MC, cache)

    def test_sensitive_to_vol_of_vol(self, small_market, micro):
        market, _ = small_market
        target = micro_index_surface(micro, EXPIRIES, (0.8, 0.9, 1.0, 1.1, 1.2))
        cache = SpotLVCache(market)
        d0 = micro_objective(PARAMS, market, target, MC, cache)
        d1 = micro_objective(replace(PARAMS, chi=1.2), market, target, MC, cache)
        assert d1 > d0

    def test_cache_quantizes_mean_reversion(self, small_market):
        market, _ = small_market
        cache = SpotLVCache(market)
        assert cache.quantize(0.300004) == 0.3
        assert cache.get(0.300004) is cache.get(0.29999999)


class TestCalibrateMicro:
    def test_collapsed_bounds(self, small_market):
        market, _ = small_market
        bounds = {k: (getattr(PARAMS, k),) * 2 for k in ("a", "beta", "chi", "rho")}
        model, rep = calibrate_micro(market, flat_target(0.3), bounds, mc=MC)
        assert model.params == PARAMS
        assert rep.optimizer.nfev == 1
        assert set(rep.at_bound) == {"a", "beta", "chi", "rho"}
        assert rep.to_dict()["params"]["kappa"] == 1.0

    def test_fixings_never_move(self, small_market):
        market, _ = small_market
        model, rep = calibrate_micro(market, flat_target(0.3), mc=MCConfig(n_paths=3000, seed=1),
                                     global_budget=6, local_budget=4, np_=3, no=3)
        assert (model.params.kappa, model.params.theta, model.params.v0) == (1.0, 1.0, 1.0)
        assert rep.optimizer.nfev <= 10 + 1
        assert len(rep.residuals) == 6


class TestMicroIndexSurface:
    def test_flat_correlated_futures_give_flat_index(self, calendar):
        # identical lognormal futures driven by one Brownian motion: the index is lognormal too
        mats = MATURITIES[:6]
        curve = FuturesCurve(REF, mats, tuple(60.0 - i for i in range(6)))
        p = MicroParams(a=0.0, beta=1e-9, chi=0.0, rho=0.0)
        lv = LocalVolGrid.constant(0.2)
        run = simulate_micro(p, curve, calendar, EXPIRIES[-1], 40000, 5, lv_spot=lv, store_dates=EXPIRIES)

        class _Market:
            reference_date = REF
            discount = DiscountCurve.flat(REF, 0.0)

        model = MicroModel(_Market(), p, lv, run.leverage, EXPIRIES[-1], calibration_run=run)
        t = micro_index_surface(model, EXPIRIES, STRIKES)
        vols = np.array([q.vol for q in t.quotes])
        assert np.all(np.abs(vols - 0.2) < 3 * np.array(t.std_errors) + 2e-3)

    def test_standard_errors_per_quote(self, micro):
        t = micro_index_surface(micro, EXPIRIES, STRIKES, n_paths=3000, seed=2)
        assert len(t.std_errors) == len(t.quotes) == 6
        assert all(0 < s < 0.05 for s in t.std_errors)
        assert t.source == "micro"

    def test_zero_vol_model_drops_everything(self, calendar):
        from commodity_slv.localvol_calib import CalibrationError
        mats = MATURITIES[:6]
        curve = FuturesCurve(REF, mats, tuple(60.0 for _ in mats))
        p = MicroParams(a=0.0, beta=1.0, chi=0.0, rho=0.0)
        run = simulate_micro(p, curve, calendar, EXPIRIES[-1], 100, 5, lv_spot=LocalVolGrid.constant(0.0),
                             store_dates=EXPIRIES)

        class _Market:
            reference_date = REF
            discount = DiscountCurve.flat(REF, 0.0)

        model = MicroModel(_Market(), p, None, run.leverage, EXPIRIES[-1], calibration_run=run)
        try:
            t = micro_index_surface(model, EXPIRIES, STRIKES)
        except CalibrationError:
            return
        # only at-the-money quotes survive, with zero implied vol
        assert all(q.strike == 1.0 and q.vol < 1e-6 for q in t.quotes)


class TestMacroObjective:
    def test_degenerate_black(self, disc):
        t = flat_target(0.25)
        p = MacroParams(theta=0.0625, chi=0.0, rho=0.0, v0=0.0625)
        assert macro_sv_objective(p, t, disc) < 1e-6

    def test_self_target(self, disc):
        p = MacroParams(theta=0.06, chi=0.5, rho=-0.4, v0=0.05)
        base = flat_target(0.2, strikes=(0.8, 0.9, 1.0, 1.1, 1.2))
        vols = sv_model_vols(p, base, disc)
        t = CalibrationTarget(REF, tuple(VolQuote(q.expiry, q.strike, float(v)) for q, v in zip(base.quotes, vols)))
        assert macro_sv_objective(p, t, disc) < 1e-8

    def test_semi_analytic_vs_mc(self, calendar):
        p = MacroParams(theta=0.06, chi=0.5, rho=-0.4, v0=0.05)
        e = EXPIRIES[-1]
        n = 200_000
        lev = LeverageSurface.constant(macro_step_times(REF, e, calendar), 1.0)
        I = simulate_macro(p, REF, calendar, e, n, 17, leverage=lev, store_dates=[e]).index_at(e)
        T = year_fraction(REF, e)
        from commodity_slv.heston import heston_calls
        K = np.array([0.9, 1.0, 1.1])
        ref = heston_calls(1.0, K, T, p.kappa, p.theta, p.chi, p.rho, p.v0)
        pay = np.maximum(I[:, None] - K, 0.0)
        assert np.all(np.abs(pay.mean(0) - ref) < 3 * pay.std(0) / math.sqrt(n))

    def test_failure_is_infinite(self, disc):
        diag = {}
        p = MacroParams(theta=1.0, chi=1.4, rho=1.0, v0=1.0)
        t = flat_target(0.2, expiries=(date(2049, 12, 16),), strikes=(1e-6,))
        v = macro_sv_objective(p, t, disc, diag)
        assert v == math.inf or v >= 0


@pytest.fixture(scope="module")
def flat_fit(calendar):
    disc = DiscountCurve.flat(REF, 0.02)
    return calibrate_macro(flat_target(0.3), disc, calendar, mc=MCConfig(n_paths=20000, seed=4),
                           global_budget=300, local_budget=200, np_=12, no=16)


class TestCalibrateMacro:
    def test_flat_target_reaches_low_vol_of_vol(self, flat_fit):
        model, rep = flat_fit
        assert rep.objective < 6 * 1e-3
        assert model.params.kappa == 1.0

    def test_flat_target_repriced(self, flat_fit):
        model, _ = flat_fit
        disc = DiscountCurve.flat(REF, 0.02)
        assert np.max(np.abs(sv_model_vols(model.params, flat_target(0.3), disc) - 0.3)) < 1e-3
        vols, _, _ = macro_vanilla_vols(model, flat_target(0.3), 40000, 8)
        assert np.max(np.abs(vols - 0.3)) < 5e-3

    def test_fixed_params_skip_fit(self, calendar, disc):
        p = MacroParams(theta=0.09, chi=0.01, rho=0.0, v0=0.09)
        model, rep = calibrate_macro(flat_target(0.3), disc, calendar, mc=MCConfig(n_paths=2000, seed=1),
                                     fixed_params=p)
        assert model.params == p and rep.optimizer is None
        assert model.settings["kappa"] == 1.0

    def test_feller_warning(self, calendar, disc):
        p = MacroParams(theta=0.01, chi=1.0, rho=0.0, v0=0.09)
        _, rep = calibrate_macro(flat_target(0.3), disc, calendar, mc=MCConfig(n_paths=2000, seed=1),
                                 fixed_params=p)
        assert not rep.feller and rep.warnings
