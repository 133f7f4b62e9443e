"""Excess-return index replication from futures price paths.

The portfolio held during business day ``t+1`` is fixed at the close of
``t``. With front weight ``alpha`` on the front contract ``Tc`` and
``1 - alpha`` on the second contract ``Tf`` the index moves by

    I[t+1] = I[t] * (alpha*F[t+1](Tc) + (1-alpha)*F[t+1](Tf)) / (alpha*F[t](Tc) + (1-alpha)*F[t](Tf))

which reduces to ``I[t] * F[t+1](Tc) / F[t](Tc)`` outside roll windows.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date
from typing import Sequence

import numpy as np

from .market_data import FuturesCurve, RollCalendar, ValidationError


class IndexDataError(ValueError):
    """Missing or non-positive futures data needed by the replication."""


@dataclass(frozen=True)
class RollState:
    front: date
    second: date
    alpha: float
    level: float = 1.0


def step_non_rolling(I_t, F_t, F_next):
    """One-day index move holding only the front contract."""
    F_t, F_next = np.asarray(F_t, dtype=float), np.asarray(F_next, dtype=float)
    if np.any(F_t <= 0) or np.any(F_next <= 0):
        raise IndexDataError("futures prices must be positive")
    out = np.asarray(I_t, dtype=float) * F_next / F_t
    return float(out) if out.ndim == 0 else out


def step_rolling(I_t, alpha, Fc_t, Ff_t, Fc_next, Ff_next):
    """One-day index move holding the ``alpha`` / ``1-alpha`` front/second mix."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"front weight must lie in [0,1], got {alpha}")
    den = alpha * np.asarray(Fc_t, dtype=float) + (1.0 - alpha) * np.asarray(Ff_t, dtype=float)
    if np.any(den <= 0):
        raise IndexDataError("non-positive roll portfolio value")
    num = alpha * np.asarray(Fc_next, dtype=float) + (1.0 - alpha) * np.asarray(Ff_next, dtype=float)
    out = np.asarray(I_t, dtype=float) * num / den
    return float(out) if out.ndim == 0 else out


def evening_state(d: date, maturities: Sequence[date], calendar: RollCalendar) -> RollState:
    """Portfolio fixed at the close of business day ``d``."""
    curve = _MaturityLookup(maturities)
    front, second = curve.roll_pair(d, calendar)
    return RollState(front, second, calendar.roll_fraction(d))


def holding_state(d: date, maturities: Sequence[date], calendar: RollCalendar) -> RollState:
    """Portfolio held during business day ``d`` (fixed the evening before)."""
    return evening_state(calendar.previous_business_day(d), maturities, calendar)


def roll_schedule(dates: Sequence[date], maturities: Sequence[date],
                  calendar: RollCalendar) -> list[RollState]:
    """Evening states for every date except the last."""
    curve = _MaturityLookup(maturities)
    out = []
    for d in dates[:-1]:
        front, second = curve.roll_pair(d, calendar)
        out.append(RollState(front, second, calendar.roll_fraction(d)))
    return out


def index_sensitivity(d: date, curve: FuturesCurve, index_level: float,
                      calendar: RollCalendar) -> dict:
    """dI/dF(T) for the contracts held during day ``d``.

    Equals ``alpha * Q`` for the front contract and ``(1-alpha) * Q`` for the
    second, where ``Q`` is the number of fictitious roll contracts held.
    """
    st = holding_state(d, curve.maturities, calendar)
    Fc, Ff = curve.price(st.front), curve.price(st.second)
    q = index_level / (st.alpha * Fc + (1.0 - st.alpha) * Ff)
    return {st.front: st.alpha * q, st.second: (1.0 - st.alpha) * q}


def bumped_index_level(d: date, base: FuturesCurve, bumped: FuturesCurve, index_level: float,
                       calendar: RollCalendar) -> float:
    """Index level at ``d`` after today's futures settlements move from ``base`` to ``bumped``."""
    st = holding_state(d, base.maturities, calendar)
    return step_rolling(index_level, st.alpha, base.price(st.front), base.price(st.second),
                        bumped.price(st.front), bumped.price(st.second))


def replay_index(I0: float, dates: Sequence[date], maturities: Sequence[date], prices,
                 calendar: RollCalendar) -> np.ndarray:
    """Replay the index over a business-daily futures price matrix.

    Parameters
    ----------
    I0 : float
        Index level on ``dates[0]``.
    dates : sequence of date
        Business-daily grid.
    maturities : sequence of date
        Futures maturities, one per column of ``prices``.
    prices : array, shape (n_dates, n_maturities) or (n_paths, n_dates, n_maturities)
        Settlement prices. NaN marks a missing quote.

    Returns
    -------
    ndarray of shape (n_dates,) or (n_paths, n_dates)
    """
    prices = np.asarray(prices, dtype=float)
    single = prices.ndim == 2
    if single:
        prices = prices[None]
    n_paths, n_dates, n_mat = prices.shape
    if n_dates != len(dates) or n_mat != len(maturities):
        raise ValueError("price matrix shape does not match dates x maturities")
    for a, b in zip(dates, dates[1:]):
        if calendar.previous_business_day(b) != a:
            raise ValueError(f"grid is not business-daily between {a} and {b}")
    col = {T: j for j, T in enumerate(maturities)}
    out = np.empty((n_paths, n_dates))
    out[:, 0] = I0
    try:
        states = roll_schedule(dates, maturities, calendar)
    except ValidationError as exc:
        raise IndexDataError(str(exc)) from None
    for m, st in enumerate(states):
        jc, jf = col[st.front], col[st.second]
        pair = prices[:, m:m + 2, :][:, :, [jc, jf]]
        if np.isnan(pair).any():
            bad_t, bad_j = np.argwhere(np.isnan(pair).any(axis=0))[0]
            raise IndexDataError(f"missing futures quote on {dates[m + bad_t]} for maturity {(st.front, st.second)[bad_j]}")
        if st.alpha == 1.0:
            out[:, m + 1] = step_non_rolling(out[:, m], pair[:, 0, 0], pair[:, 1, 0])
        else:
            out[:, m + 1] = step_rolling(out[:, m], st.alpha, pair[:, 0, 0], pair[:, 0, 1], pair[:, 1, 0], pair[:, 1, 1])
    return out[0] if single else out


class _MaturityLookup:
    """Roll-pair lookup for a bare maturity list."""

    def __init__(self, maturities):
        self.maturities = tuple(maturities)

    roll_pair = FuturesCurve.roll_pair
