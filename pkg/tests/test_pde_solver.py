import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commodity_slv.market_data import black76_call
from commodity_slv.pde_solver import (
    GridConfig,
    LocalVolGrid,
    cell_averaged_payoff,
    solve_dupire_index,
    solve_extended_dupire,
)

KQ = np.linspace(0.5, 1.5, 101)


def max_error(grid, sigma, times):
    return max(np.abs(grid.price(T, KQ) - black76_call(1.0, KQ, sigma, T)).max() for T in times)


class TestLocalVolGrid:
    def test_piecewise_constant_rows(self):
        lv = LocalVolGrid(np.array([0.5, 1.0]), np.array([0.0, 3.0]), np.array([[0.1, 0.1], [0.2, 0.2]]))
        assert lv(0.2, 1.0) == 0.1 and lv(0.5, 1.0) == 0.1
        assert lv(0.51, 1.0) == 0.2 and lv(7.0, 1.0) == 0.2

    def test_cap_and_validation(self):
        lv = LocalVolGrid(np.array([1.0]), np.array([0.0, 3.0]), np.array([[9.0, 9.0]]), cap=5.0)
        assert lv(0.5, 1.0) == 5.0
        with pytest.raises(ValueError):
            LocalVolGrid(np.array([1.0, 0.5]), np.array([0.0, 3.0]), np.ones((2, 2)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GridConfig(n_space=2)
        with pytest.raises(ValueError):
            GridConfig(k_max=0.9)


class TestConstantVol:
    @pytest.mark.parametrize("sigma", [0.1, 0.2, 0.5])
    def test_black_match_default_grid(self, sigma):
        g = solve_dupire_index(LocalVolGrid.constant(sigma), [0.25, 0.5, 1.0])
        assert max_error(g, sigma, [0.25, 0.5, 1.0]) <= 1e-4

    def test_extended_equation_reduces_at_zero_mean_reversion(self):
        lv = LocalVolGrid.constant(0.3)
        a = solve_extended_dupire(lv, 0.0, [1.0])
        b = solve_dupire_index(lv, [1.0])
        assert np.array_equal(a.values, b.values)

    def test_refinement_order(self):
        lv = LocalVolGrid.constant(0.2)
        coarse = solve_dupire_index(lv, [1.0], GridConfig(n_space=201, max_dt=1 / 200))
        fine = solve_dupire_index(lv, [1.0], GridConfig(n_space=401, max_dt=1 / 400))
        assert max_error(coarse, 0.2, [1.0]) / max_error(fine, 0.2, [1.0]) >= 3.0


class TestShape:
    def test_initial_condition_exact(self):
        g = solve_dupire_index(LocalVolGrid.constant(0.2), [0.5])
        assert np.array_equal(g.values[0], np.maximum(1.0 - g.k, 0.0))

    def test_boundaries(self):
        g = solve_extended_dupire(LocalVolGrid.constant(0.4), 0.7, [0.5, 1.0, 2.0])
        assert np.all(g.values[1:, 0] == 1.0)
        assert np.all(g.values[1:, -1] == 0.0)

    def test_cell_average_is_exact_away_from_kink(self):
        k = GridConfig().k_nodes()
        h = k[1] - k[0]
        away = np.abs(k - 1.0) > h
        assert np.allclose(cell_averaged_payoff(k)[away], np.maximum(1 - k, 0)[away], atol=1e-15)

    def test_zero_local_vol_keeps_payoff(self):
        # without diffusion the spot factor started at 1 stays at its mean 1
        lv = LocalVolGrid.constant(0.0)
        g = solve_extended_dupire(lv, 0.5, [1.0])
        away = np.abs(g.k - 1.0) > 0.1
        assert np.allclose(g.at(1.0)[away], np.maximum(1 - g.k, 0)[away], atol=1e-10)

    @settings(max_examples=15, deadline=None)
    @given(a=st.floats(0.0, 2.0), level=st.floats(0.05, 1.0), skew=st.floats(-0.3, 0.3))
    def test_monotone_and_convex(self, a, level, skew):
        k = GridConfig().k_nodes()
        lv = LocalVolGrid(np.array([0.5, 1.0]), k, np.clip([level + skew * (k - 1), level + 0.5 * skew * (k - 1)],
                                                           0.01, None))
        g = solve_extended_dupire(lv, a, [0.25, 1.0], GridConfig(max_dt=1 / 100))
        assert np.all(g.convexity() >= -1e-9)
        assert np.all(np.diff(g.values, axis=1) <= 1e-12)
        assert np.all(g.values >= 0)

    def test_mean_reversion_lowers_time_value(self):
        lv = LocalVolGrid.constant(0.3)
        slow = solve_extended_dupire(lv, 0.0, [1.0]).price(1.0, 1.0)
        fast = solve_extended_dupire(lv, 1.5, [1.0]).price(1.0, 1.0)
        assert fast < slow
