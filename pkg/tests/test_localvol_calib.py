import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commodity_slv.localvol_calib import (
    LV_FLOOR,
    CalibrationError,
    LeverageSurface,
    LVCalibConfig,
    calibrate_index_lv,
    calibrate_spot_lv,
    effective_strike,
    futures_localvol,
    futures_option_prices,
    index_option_prices,
    leverage_from_lv,
    synthetic_futures_surfaces,
)
from commodity_slv.market_data import DiscountCurve, FuturesCurve, VolQuote, VolSurface, year_fraction
from commodity_slv.pde_solver import GridConfig, LocalVolGrid

REF = date(2019, 12, 16)
MATS = (date(2020, 3, 20), date(2020, 6, 22), date(2020, 12, 21))


@pytest.fixture(scope="module")
def three_expiry_setup():
    curve = FuturesCurve(REF, MATS, (60.0, 59.0, 58.0))
    disc = DiscountCurve.flat(REF, 0.01)
    expiries = {T: T - timedelta(days=5) for T in MATS}
    k = np.linspace(0.0, 3.0, 61)
    lv = LocalVolGrid(np.array([0.5, 2.0]), k, np.array([0.3 + 0.25 * (k - 1) ** 2 - 0.05 * (k - 1)] * 2))
    return curve, disc, expiries, lv


def flat_surfaces(curve, expiries, vol):
    return {T: VolSurface(T, REF, tuple(VolQuote(expiries[T], curve.price(T) * m, vol) for m in (0.9, 1.0, 1.1)))
            for T in curve.maturities}


class TestEffectiveStrike:
    def test_at_maturity(self):
        assert effective_strike(1.0, 1.0, 90.0, 0.3, 100.0) == pytest.approx(0.9, abs=1e-15)

    def test_hand_value(self):
        assert effective_strike(0.0, 1.0, 90.0, 0.3, 100.0) == pytest.approx(1 - math.exp(0.3) * 0.1, abs=1e-14)
        assert effective_strike(0.0, 1.0, 90.0, 0.3, 100.0) == pytest.approx(0.86501, abs=1e-5)

    @settings(max_examples=100, deadline=None)
    @given(t=st.floats(0, 2), tau=st.floats(0, 3), a=st.floats(0, 2), F0=st.floats(1, 500))
    def test_atm_maps_to_one(self, t, tau, a, F0):
        assert effective_strike(t, t + tau, F0, a, F0) == 1.0


class TestFuturesLocalVol:
    def test_hand_value(self):
        lv = LocalVolGrid.constant(0.2)
        got = futures_localvol(0.0, 1.0, 100.0, lv, 0.3, 100.0)
        assert got == pytest.approx((100 - 100 * (1 - math.exp(-0.3))) * 0.2, rel=1e-14)
        assert got == pytest.approx(14.816, abs=1e-3)

    def test_vanishing_factor_is_floored(self):
        lv = LocalVolGrid.constant(0.2)
        K = 100.0 * (1 - math.exp(-0.3))
        assert futures_localvol(0.0, 1.0, K, lv, 0.3, 100.0) == LV_FLOOR

    def test_zero_mean_reversion_limit(self):
        k = np.linspace(0, 3, 31)
        lv = LocalVolGrid(np.array([5.0]), k, [0.2 + 0.1 * k])
        K = np.array([80.0, 100.0, 120.0])
        assert np.allclose(futures_localvol(0.3, 1.0, K, lv, 0.0, 100.0), K * lv(0.3, K / 100.0), rtol=1e-14)

    def test_extrapolation_counter(self):
        counter = {}
        futures_localvol(0.0, 1.0, np.array([100.0, 1000.0]), LocalVolGrid.constant(0.2), 0.3, 100.0, counter)
        assert counter["lv_extrapolated"] == 1


class TestSpotCalibration:
    def test_flat_surface(self, three_expiry_setup):
        curve, disc, expiries, _ = three_expiry_setup
        lv, rep = calibrate_spot_lv(a=0.0, curve=curve, discount=disc, surfaces=flat_surfaces(curve, expiries, 0.2))
        assert rep.converged and rep.max_residual <= 1e-4
        # flat Black vol at a = 0 is a constant local vol
        assert np.allclose(lv(0.1, np.array([0.9, 1.0, 1.1])), 0.2, atol=2e-3)

    @pytest.mark.parametrize("a", [0.0, 0.3])
    def test_round_trip(self, three_expiry_setup, a):
        curve, disc, expiries, true_lv = three_expiry_setup
        surfaces = synthetic_futures_surfaces(true_lv, a, curve, disc, expiries, (0.8, 0.9, 1.0, 1.1, 1.2))
        lv, rep = calibrate_spot_lv(a=a, curve=curve, discount=disc, surfaces=surfaces)
        assert rep.converged and rep.iterations <= 50
        quotes = [(T, q.expiry, q.strike) for T, s in surfaces.items() for q in s.quotes]
        prices = futures_option_prices(lv, a, curve, disc, quotes)
        from commodity_slv.market_data import implied_vol_array
        for (T, e, K), p in zip(quotes, prices):
            v = implied_vol_array(p, curve.price(T), K, year_fraction(REF, e), disc.df(e))
            assert abs(v - surfaces[T].vol(e, K)) <= 1e-4

    def test_single_quote_fast(self, three_expiry_setup):
        curve, disc, expiries, _ = three_expiry_setup
        T = MATS[1]
        surf = {T: VolSurface(T, REF, (VolQuote(expiries[T], 59.0, 0.35),))}
        c = FuturesCurve(REF, (T,), (59.0,))
        _, rep = calibrate_spot_lv(a=0.3, curve=c, discount=disc, surfaces=surf)
        assert rep.converged and rep.iterations <= 5

    def test_residual_non_increasing_early(self, three_expiry_setup):
        curve, disc, expiries, true_lv = three_expiry_setup
        surfaces = synthetic_futures_surfaces(true_lv, 0.3, curve, disc, expiries, (0.8, 0.9, 1.0, 1.1, 1.2))
        _, rep = calibrate_spot_lv(a=0.3, curve=curve, discount=disc, surfaces=surfaces)
        h = rep.history[:5]
        assert all(b <= a for a, b in zip(h, h[1:]))

    def test_non_convergence_raises_with_report(self, three_expiry_setup):
        curve, disc, expiries, true_lv = three_expiry_setup
        surfaces = synthetic_futures_surfaces(true_lv, 0.3, curve, disc, expiries, (0.8, 1.0, 1.2))
        with pytest.raises(CalibrationError) as err:
            calibrate_spot_lv(a=0.3, curve=curve, discount=disc, surfaces=surfaces,
                              config=LVCalibConfig(max_iter=1))
        assert err.value.report is not None and err.value.report.residuals

    def test_bundled_market(self, small_market):
        market, _ = small_market
        _, rep = calibrate_spot_lv(market, 0.3)
        assert rep.converged


class TestIndexCalibration:
    def test_round_trip(self):
        disc = DiscountCurve.flat(REF, 0.015)
        exps = (date(2020, 3, 16), date(2020, 9, 16))
        quotes = tuple(VolQuote(e, K, 0.3 + 0.2 * (K - 1.0) ** 2 - 0.05 * (K - 1.0) - 0.02 * i)
                       for i, e in enumerate(exps) for K in (0.8, 0.9, 1.0, 1.1, 1.2))
        surf = VolSurface("INDEX", REF, quotes)
        lv, rep = calibrate_index_lv(surf, disc, 1.0)
        assert rep.converged and rep.max_residual <= 1e-4
        prices = index_option_prices(lv, disc, 1.0, REF, [(q.expiry, q.strike) for q in quotes])
        from commodity_slv.market_data import implied_vol_array
        for q, p in zip(quotes, prices):
            v = implied_vol_array(p, 1.0, q.strike, year_fraction(REF, q.expiry), disc.df(q.expiry))
            assert abs(v - q.vol) <= 1e-4

    def test_index_level_scaling(self):
        disc = DiscountCurve.flat(REF, 0.0)
        quotes = tuple(VolQuote(date(2020, 6, 16), K, 0.25) for K in (80.0, 100.0, 120.0))
        lv, rep = calibrate_index_lv(VolSurface("INDEX", REF, quotes), disc, 100.0)
        assert rep.converged
        assert np.allclose(lv(0.3, np.array([0.8, 1.0, 1.2])), 0.25, atol=3e-3)


class TestLeverage:
    def test_unit_variance(self):
        L = np.array([0.1, 0.3, 0.5])
        assert np.array_equal(leverage_from_lv(L, np.ones(3)), L)

    def test_constant_variance(self):
        L = np.array([0.1, 0.3, 0.5])
        assert np.allclose(leverage_from_lv(L, np.full(3, 0.04)), L / 0.2, rtol=1e-14)

    def test_floor_counter(self):
        c = {}
        out = leverage_from_lv(np.array([0.2, 0.2]), np.array([-1.0, 1.0]), c)
        assert out[0] == pytest.approx(0.2 / math.sqrt(1e-8)) and c["variance_floored"] == 1

    def test_surface_lookup(self):
        s = LeverageSurface(np.array([0.0, 0.1]), np.array([[1.0, 2.0], [1.0, 3.0]]), np.array([[1.0, 2.0], [3.0, 5.0]]))
        assert np.allclose(s.at_step(0, [0.0, 1.5, 9.0]), [1.0, 1.5, 2.0])
        assert np.allclose(s.at_step(1, [2.0]), [4.0])

    def test_constant_surface(self):
        s = LeverageSurface.constant(np.arange(5) / 365.0, 1.0)
        assert np.all(s.at_step(3, np.array([1e-9, 1.0, 1e9])) == 1.0)
