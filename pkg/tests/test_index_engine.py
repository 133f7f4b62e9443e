from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commodity_slv.index_engine import (
    IndexDataError,
    bumped_index_level,
    evening_state,
    holding_state,
    index_sensitivity,
    replay_index,
    step_non_rolling,
    step_rolling,
)
from commodity_slv.market_data import FuturesCurve, RollCalendar

MATS = (date(2020, 1, 21), date(2020, 2, 20), date(2020, 3, 20), date(2020, 4, 21))


def hand_schedule(d: date):
    """Evening (front, second, alpha) from 13 January to 11 March 2020, written out by hand."""
    weights = {date(2020, 2, 7): 0.8, date(2020, 2, 10): 0.6, date(2020, 2, 11): 0.4, date(2020, 2, 12): 0.2,
               date(2020, 3, 6): 0.8, date(2020, 3, 9): 0.6, date(2020, 3, 10): 0.4, date(2020, 3, 11): 0.2}
    if d < date(2020, 2, 13):
        return MATS[1], MATS[2], weights.get(d, 1.0)
    return MATS[2], MATS[3], weights.get(d, 1.0)


def loop_oracle(I0, dates, prices):
    """Quantity bookkeeping: Q units of the roll contract fixed each evening."""
    col = {T: j for j, T in enumerate(MATS)}
    out = [I0]
    for t in range(len(dates) - 1):
        front, second, alpha = hand_schedule(dates[t])
        value_t = alpha * prices[t][col[front]] + (1 - alpha) * prices[t][col[second]]
        q = out[-1] / value_t
        out.append(q * (alpha * prices[t + 1][col[front]] + (1 - alpha) * prices[t + 1][col[second]]))
    return np.array(out)


class TestSteps:
    def test_flat(self):
        assert step_non_rolling(1.0, 100.0, 100.0) == 1.0

    def test_two_percent(self):
        assert step_non_rolling(1.0, 100.0, 102.0) == pytest.approx(1.02, rel=1e-15)

    def test_rolling_reduces_at_alpha_one(self):
        assert step_rolling(1.3, 1.0, 50.0, 70.0, 51.0, 90.0) == step_non_rolling(1.3, 50.0, 51.0)

    def test_rolling_hand_value(self):
        # (0.8*101 + 0.2*102) / 100
        assert step_rolling(1.0, 0.8, 100.0, 100.0, 101.0, 102.0) == pytest.approx(1.012, rel=1e-15)

    def test_rolling_unchanged(self):
        assert step_rolling(2.0, 0.4, 60.0, 61.0, 60.0, 61.0) == 2.0

    def test_domain_errors(self):
        with pytest.raises(IndexDataError):
            step_non_rolling(1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            step_rolling(1.0, 1.2, 1.0, 1.0, 1.0, 1.0)

    def test_composition_equals_closed_form(self, rng):
        F = 60.0 * np.exp(np.cumsum(rng.normal(0, 0.02, 21)))
        I = 1.7
        for a, b in zip(F, F[1:]):
            I = step_non_rolling(I, a, b)
        assert I == pytest.approx(1.7 * F[-1] / F[0], rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(1.0, 200.0), min_size=2, max_size=30))
    def test_positivity(self, prices):
        I = 1.0
        for a, b in zip(prices, prices[1:]):
            I = step_non_rolling(I, a, b)
            assert I > 0


class TestRollStates:
    def test_states_match_hand_schedule(self, calendar):
        for d in calendar.business_days(date(2020, 1, 27), date(2020, 3, 11)):
            st_ = evening_state(d, MATS, calendar)
            assert (st_.front, st_.second, st_.alpha) == pytest.approx(hand_schedule(d)), d

    def test_holding_is_previous_evening(self, calendar):
        d = date(2020, 2, 10)
        assert holding_state(d, MATS, calendar) == evening_state(date(2020, 2, 7), MATS, calendar)


class TestReplay:
    def test_constant_futures_constant_index(self, calendar):
        dates = calendar.business_days(date(2020, 1, 2), date(2020, 3, 11))
        prices = np.tile([60.0, 61.0, 62.0, 63.0], (len(dates), 1))
        assert np.all(replay_index(1.0, dates, MATS, prices, calendar) == 1.0)

    def test_five_up_days_outside_roll(self, calendar):
        dates = calendar.business_days(date(2020, 1, 20), date(2020, 1, 27))
        F = 60.0 * 1.01 ** np.arange(len(dates))
        prices = np.column_stack([np.full(len(dates), 55.0), F, np.full(len(dates), 58.0), np.full(len(dates), 57.0)])
        I = replay_index(1.0, dates, MATS, prices, calendar)
        assert I[5] == pytest.approx(1.01 ** 5, rel=1e-12)

    def test_non_roll_window_closed_form(self, calendar, rng):
        dates = calendar.business_days(date(2020, 1, 14), date(2020, 2, 6))
        prices = 60.0 * np.exp(np.cumsum(rng.normal(0, 0.02, (len(dates), 4)), axis=0))
        I = replay_index(1.0, dates, MATS, prices, calendar)
        assert abs(I[-1] / (prices[-1, 1] / prices[0, 1]) - 1) <= 1e-12

    def test_roll_month_matches_day_loop(self, calendar, rng):
        dates = calendar.business_days(date(2020, 1, 27), date(2020, 3, 11))
        base = np.array([60.0, 60.6, 61.2, 61.8])  # linear contango
        prices = base * np.exp(np.cumsum(rng.normal(0, 0.015, (len(dates), 4)), axis=0))
        I = replay_index(1.0, dates, MATS, prices, calendar)
        oracle = loop_oracle(1.0, dates, prices)
        assert np.max(np.abs(I / oracle - 1)) <= 1e-12

    def test_missing_quote_names_date_and_maturity(self, calendar):
        dates = calendar.business_days(date(2020, 1, 27), date(2020, 1, 31))
        prices = np.tile([60.0, 61.0, 62.0, 63.0], (len(dates), 1))
        prices[2, 1] = np.nan
        with pytest.raises(IndexDataError, match="2020-01-29.*2020-02-20|2020-02-20.*2020-01-29"):
            replay_index(1.0, dates, MATS, prices, calendar)

    def test_path_batch(self, calendar, rng):
        dates = calendar.business_days(date(2020, 2, 3), date(2020, 2, 28))
        prices = 60.0 * np.exp(np.cumsum(rng.normal(0, 0.02, (3, len(dates), 4)), axis=1))
        batch = replay_index(1.0, dates, MATS, prices, calendar)
        for n in range(3):
            assert np.array_equal(batch[n], replay_index(1.0, dates, MATS, prices[n], calendar))


class TestSensitivity:
    def test_alpha_q_split(self, calendar, ref):
        curve = FuturesCurve(ref, MATS, (60.0, 61.0, 62.0, 63.0))
        d = date(2020, 2, 11)  # held weight fixed on Feb 10 evening: 0.6
        s = index_sensitivity(d, curve, 1.2, calendar)
        q = 1.2 / (0.6 * 61.0 + 0.4 * 62.0)
        assert s[MATS[1]] == pytest.approx(0.6 * q) and s[MATS[2]] == pytest.approx(0.4 * q)

    def test_bumped_level_is_linear_in_front(self, calendar, ref):
        curve = FuturesCurve(ref, MATS, (60.0, 61.0, 62.0, 63.0))
        d = date(2020, 1, 2)
        bumped = curve.bumped(MATS[0], 1e-3)
        level = bumped_index_level(d, curve, bumped, 1.0, calendar)
        assert level == pytest.approx(1.0 + index_sensitivity(d, curve, 1.0, calendar)[MATS[0]] * 60.0 * 1e-3,
                                      rel=1e-13)
