"""Market inputs: futures and discount curves, Black-76 vol surfaces, roll calendar.

All containers are frozen after construction. Times are ACT/365F year
fractions measured from the snapshot reference date.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

DAYS_PER_YEAR = 365.0


class MarketDataError(ValueError):
    """Base class for market input problems."""


class ParseError(MarketDataError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ValidationError(MarketDataError):
    pass


class ImpliedVolError(MarketDataError):
    """Price outside the no-arbitrage band of a Black-76 call."""


def year_fraction(start: date, end: date) -> float:
    return (end - start).days / DAYS_PER_YEAR


# ---------------------------------------------------------------------------
# Black-76
# ---------------------------------------------------------------------------

def _check_finite(**kwargs):
    for name, value in kwargs.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite input {name}={value!r}")


def black76_call(F, K, sigma, T, df=1.0):
    """Discounted Black-76 call price.

    Works elementwise on arrays. At zero total volatility the intrinsic
    value ``df * max(F - K, 0)`` is returned.
    """
    _check_finite(F=F, K=K, sigma=sigma, T=T, df=df)
    F, K, sigma, T, df = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (F, K, sigma, T, df)))
    total = sigma * np.sqrt(np.maximum(T, 0.0))
    intrinsic = np.maximum(F - K, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = total > 0
        d1 = np.where(safe, (np.log(F / np.where(K > 0, K, 1.0)) + 0.5 * total**2) / np.where(safe, total, 1.0), 0.0)
        d2 = d1 - total
        price = np.where(safe & (K > 0), F * ndtr(d1) - K * ndtr(d2), intrinsic)
    # K <= 0 : call is a forward
    price = np.where(K <= 0, F - K, price)
    out = df * price
    return float(out) if out.ndim == 0 else out


def black76_vega(F, K, sigma, T, df=1.0):
    """dPrice/dsigma of the discounted Black-76 call."""
    F, K, sigma, T, df = (np.asarray(x, dtype=float) for x in (F, K, sigma, T, df))
    total = sigma * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(F / K) + 0.5 * total**2) / total
        vega = df * F * np.sqrt(T) * np.exp(-0.5 * d1**2) / math.sqrt(2.0 * math.pi)
    vega = np.where(total > 0, vega, 0.0)
    return float(vega) if vega.ndim == 0 else vega


def implied_vol(price: float, F: float, K: float, T: float, df: float = 1.0,
                tol: float = 1e-12) -> float:
    """Invert :func:`black76_call` for the volatility.

    Raises
    ------
    ImpliedVolError
        If ``price`` lies outside ``[df*(F-K)^+, df*F)``.
    """
    _check_finite(price=price, F=F, K=K, T=T, df=df)
    lower = df * max(F - K, 0.0)
    upper = df * F
    if price < lower - 1e-14 * max(1.0, upper):
        raise ImpliedVolError(f"price {price!r} below intrinsic lower bound {lower!r}")
    if price >= upper:
        raise ImpliedVolError(f"price {price!r} not below upper bound df*F={upper!r}")
    if T <= 0.0 or price <= lower:
        return 0.0

    def f(s):
        return black76_call(F, K, s, T, df) - price

    hi = 1.0
    while f(hi) < 0.0:
        hi *= 2.0
        if hi > 1e4:
            raise ImpliedVolError(f"no volatility reproduces price {price!r}")
    return brentq(f, 0.0, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)


def implied_vol_array(price, F, K, T, df=1.0, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Vectorized inversion by bracketed Newton; NaN where the price is out of bounds."""
    price, F, K, T, df = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (price, F, K, T, df)))
    lower = df * np.maximum(F - K, 0.0)
    upper = df * F
    ok = np.isfinite(price) & (price >= lower - 1e-14 * np.maximum(1.0, upper)) & (price < upper) & (T > 0)
    sig = np.full(price.shape, np.nan)
    zero = ok & (price <= lower)
    sig[zero] = 0.0
    live = ok & ~zero
    if not live.any():
        return sig
    p, f, k, t, d = (x[live] for x in (price, F, K, T, df))
    lo = np.zeros_like(p)
    hi = np.full_like(p, 1.0)
    for _ in range(60):
        short = black76_call(f, k, hi, t, d) < p
        if not short.any():
            break
        hi = np.where(short, hi * 2.0, hi)
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        val = np.atleast_1d(black76_call(f, k, x, t, d)) - p
        lo = np.where(val < 0, x, lo)
        hi = np.where(val >= 0, x, hi)
        vega = np.atleast_1d(black76_vega(f, k, x, t, d))
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - val / vega
        inside = np.isfinite(step) & (step > lo) & (step < hi)
        x_new = np.where(inside, step, 0.5 * (lo + hi))
        done = np.abs(x_new - x) <= tol
        x = x_new
        if done.all():
            break
    sig[live] = x
    return sig


# ---------------------------------------------------------------------------
# Calendar
# ---------------------------------------------------------------------------

ROLL_START_BDAY = 5
ROLL_END_BDAY = 9
ROLL_FRACTIONS = (0.8, 0.6, 0.4, 0.2, 0.0)


@dataclass(frozen=True)
class RollCalendar:
    """Weekday business calendar with optional holidays and the monthly roll window.

    The index rolls on the 5th to 9th business day of each month. The front
    weight held overnight after the n-th roll day is ``ROLL_FRACTIONS[n-1]``.
    """

    holidays: frozenset = field(default_factory=frozenset)

    def is_business_day(self, d: date) -> bool:
        return d.weekday() < 5 and d not in self.holidays

    def business_days(self, start: date, end: date) -> list[date]:
        """Business days in the closed interval ``[start, end]``."""
        out = []
        d = start
        while d <= end:
            if self.is_business_day(d):
                out.append(d)
            d += timedelta(days=1)
        return out

    def adjust(self, d: date) -> date:
        """Following business-day adjustment."""
        while not self.is_business_day(d):
            d += timedelta(days=1)
        return d

    def previous_business_day(self, d: date) -> date:
        d -= timedelta(days=1)
        while not self.is_business_day(d):
            d -= timedelta(days=1)
        return d

    def nth_business_day(self, year: int, month: int, n: int) -> date:
        d = date(year, month, 1)
        count = 0
        while True:
            if self.is_business_day(d):
                count += 1
                if count == n:
                    return d
            d += timedelta(days=1)

    def business_day_of_month(self, d: date) -> int:
        """1-based position of business day ``d`` within its month."""
        count = 0
        x = date(d.year, d.month, 1)
        while x <= d:
            if self.is_business_day(x):
                count += 1
            x += timedelta(days=1)
        return count

    def roll_days(self, year: int, month: int) -> list[date]:
        return [self.nth_business_day(year, month, n) for n in range(ROLL_START_BDAY, ROLL_END_BDAY + 1)]

    def roll_schedule(self, year: int, month: int) -> list[tuple[date, float]]:
        """The five roll days with the old-front weight fixed at each day's close."""
        return list(zip(self.roll_days(year, month), ROLL_FRACTIONS))

    def roll_fraction(self, d: date) -> float:
        """Front weight fixed at the close of business day ``d``.

        Relative to the pair given by :meth:`FuturesCurve.roll_pair` for the
        same day: from the 9th business day on that pair is already the new
        one, so the weight is back to 1.
        """
        n = self.business_day_of_month(d)
        if ROLL_START_BDAY <= n < ROLL_END_BDAY:
            return ROLL_FRACTIONS[n - ROLL_START_BDAY]
        return 1.0


def _next_month(year: int, month: int) -> tuple[int, int]:
    return (year + 1, 1) if month == 12 else (year, month + 1)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FuturesCurve:
    reference_date: date
    maturities: tuple
    prices: tuple

    def __post_init__(self):
        object.__setattr__(self, "maturities", tuple(self.maturities))
        object.__setattr__(self, "prices", tuple(float(p) for p in self.prices))
        if len(self.maturities) != len(self.prices) or not self.maturities:
            raise ValidationError("futures curve needs one price per maturity")
        for a, b in zip(self.maturities, self.maturities[1:]):
            if not a < b:
                raise ValidationError(f"futures maturities not strictly increasing at {b}")
        for T, p in zip(self.maturities, self.prices):
            if not (math.isfinite(p) and p > 0):
                raise ValidationError(f"futures price for {T} must be positive, got {p}")

    def __len__(self):
        return len(self.maturities)

    def price(self, maturity: date) -> float:
        return self.prices[self.index_of(maturity)]

    def index_of(self, maturity: date) -> int:
        try:
            return self.maturities.index(maturity)
        except ValueError:
            raise KeyError(f"no futures with maturity {maturity}") from None

    def times(self) -> np.ndarray:
        return np.array([year_fraction(self.reference_date, T) for T in self.maturities])

    def roll_pair(self, d: date, calendar: RollCalendar) -> tuple[date, date]:
        """Front and second contracts of the roll window governing business day ``d``.

        The front is the first maturity after the 9th business day of the
        month whose roll has not yet completed at ``d``.
        """
        y, m = d.year, d.month
        end = calendar.nth_business_day(y, m, ROLL_END_BDAY)
        if d >= end:
            y, m = _next_month(y, m)
            end = calendar.nth_business_day(y, m, ROLL_END_BDAY)
        i = bisect_right(self.maturities, end)
        if i + 1 >= len(self.maturities):
            raise ValidationError(f"curve has no front/second pair for roll window ending {end}")
        return self.maturities[i], self.maturities[i + 1]

    def bumped(self, maturity: date, rel: float) -> "FuturesCurve":
        prices = list(self.prices)
        i = self.index_of(maturity)
        prices[i] = prices[i] * (1.0 + rel)
        return FuturesCurve(self.reference_date, self.maturities, prices)


@dataclass(frozen=True)
class DiscountCurve:
    """Zero-coupon curve with log-linear interpolation between pillars."""

    reference_date: date
    dates: tuple
    dfs: tuple

    def __post_init__(self):
        dates, dfs = list(self.dates), [float(x) for x in self.dfs]
        if not dates or dates[0] != self.reference_date:
            dates.insert(0, self.reference_date)
            dfs.insert(0, 1.0)
        if abs(dfs[0] - 1.0) > 1e-14:
            raise ValidationError(f"discount factor at reference date must be 1, got {dfs[0]}")
        for a, b in zip(dates, dates[1:]):
            if not a < b:
                raise ValidationError(f"discount pillars not strictly increasing at {b}")
        for d, x in zip(dates, dfs):
            if not (0.0 < x <= 1.0):
                raise ValidationError(f"discount factor at {d} outside (0,1]: {x}")
        for (d0, x0), (d1, x1) in zip(zip(dates, dfs), zip(dates[1:], dfs[1:])):
            if x1 > x0:
                raise ValidationError(f"discount factor increases between {d0} and {d1}")
        object.__setattr__(self, "dates", tuple(dates))
        object.__setattr__(self, "dfs", tuple(dfs))

    @classmethod
    def flat(cls, reference_date: date, rate: float = 0.0, horizon_years: int = 10) -> "DiscountCurve":
        end = reference_date + timedelta(days=int(365 * horizon_years))
        return cls(reference_date, (reference_date, end), (1.0, math.exp(-rate * year_fraction(reference_date, end))))

    def df_time(self, t):
        ts = np.array([year_fraction(self.reference_date, d) for d in self.dates])
        logs = np.log(np.array(self.dfs))
        t = np.asarray(t, dtype=float)
        if len(ts) == 1:
            out = np.ones_like(t)
        else:
            out = np.exp(np.interp(t, ts, logs))
            # flat-forward extrapolation beyond the last pillar
            slope = (logs[-1] - logs[-2]) / (ts[-1] - ts[-2])
            out = np.where(t > ts[-1], np.exp(logs[-1] + slope * (t - ts[-1])), out)
        return float(out) if out.ndim == 0 else out

    def df(self, d: date) -> float:
        return self.df_time(year_fraction(self.reference_date, d))


# ---------------------------------------------------------------------------
# Vol surfaces
# ---------------------------------------------------------------------------

INDEX = "INDEX"


@dataclass(frozen=True)
class VolQuote:
    expiry: date
    strike: float
    vol: float


@dataclass(frozen=True)
class VolSurface:
    """Black-76 implied vols for one underlier (a futures maturity or the index)."""

    underlier: object
    reference_date: date
    quotes: tuple

    def __post_init__(self):
        quotes = tuple(sorted(self.quotes, key=lambda q: (q.expiry, q.strike)))
        object.__setattr__(self, "quotes", quotes)
        seen = set()
        for q in quotes:
            key = (q.expiry, q.strike)
            if key in seen:
                raise ValidationError(f"duplicate quote {self.underlier} expiry={q.expiry} strike={q.strike}")
            seen.add(key)
            if not (0.0 < q.vol < 5.0):
                raise ValidationError(f"vol {q.vol} outside (0,5) for {self.underlier} {q.expiry} K={q.strike}")
            if not q.strike > 0:
                raise ValidationError(f"non-positive strike {q.strike} for {self.underlier} {q.expiry}")
            if q.expiry <= self.reference_date:
                raise ValidationError(f"expiry {q.expiry} not after reference date")
            if isinstance(self.underlier, date) and q.expiry > self.underlier:
                raise ValidationError(f"expiry {q.expiry} after futures maturity {self.underlier}")

    def expiries(self) -> list[date]:
        return sorted({q.expiry for q in self.quotes})

    def slice(self, expiry: date) -> tuple[np.ndarray, np.ndarray]:
        qs = [q for q in self.quotes if q.expiry == expiry]
        return np.array([q.strike for q in qs]), np.array([q.vol for q in qs])

    def vol(self, expiry: date, strike: float) -> float:
        """Interpolated vol: linear in strike per expiry, linear in total variance across expiries."""
        exps = self.expiries()
        t = year_fraction(self.reference_date, expiry)
        ts = [year_fraction(self.reference_date, e) for e in exps]

        def at(e):
            ks, vs = self.slice(e)
            return float(np.interp(strike, ks, vs))

        if t <= ts[0]:
            return at(exps[0])
        if t >= ts[-1]:
            return at(exps[-1])
        j = bisect_left(ts, t)
        if ts[j] == t:
            return at(exps[j])
        t0, t1 = ts[j - 1], ts[j]
        w0, w1 = at(exps[j - 1]) ** 2 * t0, at(exps[j]) ** 2 * t1
        w = w0 + (w1 - w0) * (t - t0) / (t1 - t0)
        return math.sqrt(w / t)

    def bumped(self, shift: float, expiry: date | None = None) -> "VolSurface":
        quotes = [VolQuote(q.expiry, q.strike, q.vol + shift if expiry in (None, q.expiry) else q.vol)
                  for q in self.quotes]
        return VolSurface(self.underlier, self.reference_date, tuple(quotes))


@dataclass(frozen=True)
class MarketSnapshot:
    reference_date: date
    futures: FuturesCurve
    discount: DiscountCurve
    futures_vols: dict
    index_vols: VolSurface | None = None
    calendar: RollCalendar = field(default_factory=RollCalendar)
    index_level: float = 1.0

    def __post_init__(self):
        for T in self.futures_vols:
            if T not in self.futures.maturities:
                raise ValidationError(f"vol surface for unknown futures maturity {T}")

    def with_futures_vols(self, futures_vols: dict) -> "MarketSnapshot":
        return MarketSnapshot(self.reference_date, self.futures, self.discount, dict(futures_vols),
                              self.index_vols, self.calendar, self.index_level)

    def with_index_vols(self, index_vols: VolSurface | None) -> "MarketSnapshot":
        return MarketSnapshot(self.reference_date, self.futures, self.discount, self.futures_vols, index_vols,
                              self.calendar, self.index_level)

    def bump_futures_vols(self, shift: float, maturity: date | None = None) -> "MarketSnapshot":
        vols = {T: (s.bumped(shift) if maturity in (None, T) else s) for T, s in self.futures_vols.items()}
        return self.with_futures_vols(vols)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _read_rows(path, header: Sequence[str]):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if [h.strip() for h in got] != list(header):
            raise ParseError(path, 1, f"expected header {','.join(header)}, got {','.join(got)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def _parse_date(path, line, s) -> date:
    try:
        return date.fromisoformat(s)
    except ValueError:
        raise ParseError(path, line, f"bad ISO date {s!r}") from None


def _parse_float(path, line, s) -> float:
    try:
        x = float(s)
    except ValueError:
        raise ParseError(path, line, f"bad number {s!r}") from None
    if not math.isfinite(x):
        raise ParseError(path, line, f"non-finite number {s!r}")
    return x


def read_futures_curve(path, reference_date: date) -> FuturesCurve:
    mats, prices = [], []
    for line, (m, p) in _read_rows(path, ("maturity", "price")):
        mats.append(_parse_date(path, line, m))
        price = _parse_float(path, line, p)
        if price <= 0:
            raise ValidationError(f"{path}:{line}: futures price must be positive, got {price}")
        prices.append(price)
    return FuturesCurve(reference_date, tuple(mats), tuple(prices))


def read_discount_curve(path, reference_date: date | None = None) -> DiscountCurve:
    dates, dfs = [], []
    for line, (d, x) in _read_rows(path, ("date", "df")):
        dates.append(_parse_date(path, line, d))
        dfs.append(_parse_float(path, line, x))
    if not dates:
        raise ParseError(path, 2, "no discount pillars")
    return DiscountCurve(reference_date or dates[0], tuple(dates), tuple(dfs))


def read_futures_vols(path, reference_date: date) -> dict:
    groups: dict = {}
    for line, (m, e, k, v) in _read_rows(path, ("futures_maturity", "expiry", "strike", "vol")):
        T = _parse_date(path, line, m)
        q = VolQuote(_parse_date(path, line, e), _parse_float(path, line, k), _parse_float(path, line, v))
        groups.setdefault(T, []).append(q)
    return {T: VolSurface(T, reference_date, tuple(qs)) for T, qs in sorted(groups.items())}


def read_index_vols(path, reference_date: date) -> VolSurface:
    qs = []
    for line, (e, k, v) in _read_rows(path, ("expiry", "strike", "vol")):
        qs.append(VolQuote(_parse_date(path, line, e), _parse_float(path, line, k), _parse_float(path, line, v)))
    return VolSurface(INDEX, reference_date, tuple(qs))


def load_market(futures_curve, discount, vols_futures=None, vols_index=None,
                reference_date: date | None = None, index_level: float = 1.0,
                holidays: Iterable[date] = ()) -> MarketSnapshot:
    """Load and validate a :class:`MarketSnapshot` from the CSV files.

    If ``reference_date`` is omitted it is taken from the first pillar of
    the discount file, which must then carry ``df == 1``.
    """
    disc = read_discount_curve(discount, reference_date)
    ref = disc.reference_date
    curve = read_futures_curve(futures_curve, ref)
    fv = read_futures_vols(vols_futures, ref) if vols_futures else {}
    iv = read_index_vols(vols_index, ref) if vols_index else None
    if not index_level > 0:
        raise ValidationError(f"index level must be positive, got {index_level}")
    return MarketSnapshot(ref, curve, disc, fv, iv, RollCalendar(frozenset(holidays)), float(index_level))


def write_futures_curve(curve: FuturesCurve, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["maturity", "price"])
        for T, p in zip(curve.maturities, curve.prices):
            w.writerow([T.isoformat(), repr(p)])


def write_discount_curve(curve: DiscountCurve, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "df"])
        for d, x in zip(curve.dates, curve.dfs):
            w.writerow([d.isoformat(), repr(x)])


def write_futures_vols(surfaces: dict, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["futures_maturity", "expiry", "strike", "vol"])
        for T in sorted(surfaces):
            for q in surfaces[T].quotes:
                w.writerow([T.isoformat(), q.expiry.isoformat(), repr(q.strike), repr(q.vol)])


def write_index_vols(surface: VolSurface, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["expiry", "strike", "vol"])
        for q in surface.quotes:
            w.writerow([q.expiry.isoformat(), repr(q.strike), repr(q.vol)])


def write_market(snapshot: MarketSnapshot, directory) -> dict:
    """Write the four CSV files into ``directory``; returns the path map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "futures_curve": directory / "futures_curve.csv",
        "discount": directory / "discount.csv",
        "vols_futures": directory / "vols_futures.csv",
        "vols_index": directory / "vols_index.csv",
    }
    write_futures_curve(snapshot.futures, paths["futures_curve"])
    write_discount_curve(snapshot.discount, paths["discount"])
    write_futures_vols(snapshot.futures_vols, paths["vols_futures"])
    if snapshot.index_vols is not None:
        write_index_vols(snapshot.index_vols, paths["vols_index"])
    else:
        del paths["vols_index"]
    return paths
