"""Path-dependent contracts on the index (or a single futures) and their Monte Carlo prices.

Levels in :class:`AutocallableSpec`, :class:`AthenaSpec` and
:class:`KnockInSpec` are relative to a reference level ``I_ref`` (the
initial index unless pinned explicitly, which keeps barriers fixed when the
spot is bumped for deltas). Payoffs are per unit notional.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .market_data import INDEX, DiscountCurve, RollCalendar
from .mc_engine import PathBundle

STYLES = ("bullet", "digital", "snowball")
RELEVANCE_THRESHOLD = 0.5
RELIABILITY_SIGMAS = 5.0


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ComparisonPolicy:
    """Inclusive/exclusive conventions for every barrier test."""

    autocall_inclusive: bool = True     # autocall when S >= H
    coupon_inclusive: bool = False      # digital coupon when S > K
    athena_inclusive: bool = True       # early redemption when I >= I_0
    knock_in_inclusive: bool = True     # down barrier breached when S <= B

    def autocalled(self, s, h):
        return s >= h if self.autocall_inclusive else s > h

    def coupon(self, s, k):
        return s >= k if self.coupon_inclusive else s > k

    def athena_called(self, s, level):
        return s >= level if self.athena_inclusive else s > level

    def knocked_down(self, s, b):
        return s <= b if self.knock_in_inclusive else s < b


DEFAULT_POLICY = ComparisonPolicy()


@dataclass(frozen=True)
class PriceResult:
    value: float
    std_error: float
    n_paths: int

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error, "n_paths": self.n_paths}


def mc_estimate(x: np.ndarray) -> PriceResult:
    """Mean and standard error with numpy's pairwise summation (fixed reduction order)."""
    x = np.ascontiguousarray(x, dtype=float)
    n = x.size
    mean = float(np.sum(x) / n)
    se = float(math.sqrt(np.sum((x - mean) ** 2) / (n - 1) / n)) if n > 1 else 0.0
    return PriceResult(mean, se, n)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AutocallableSpec:
    """Autocallable note; barriers ``H_i`` and coupon strikes ``K_i`` relative to ``I_ref``.

    With ``termination_coupon`` the coupon of the termination date is paid
    on top of the rebate; otherwise only paths alive after ``T_i`` receive it.
    """

    dates: tuple
    barriers: tuple
    strikes: tuple
    coupon: float
    style: str = "bullet"
    underlier: object = INDEX
    reference_level: float | None = None
    termination_coupon: bool = True

    def __post_init__(self):
        for name in ("dates", "barriers", "strikes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.dates)
        if n == 0 or len(self.barriers) != n or len(self.strikes) != n:
            raise ContractError("dates, barriers and strikes must have the same non-zero length")
        if any(not a < b for a, b in zip(self.dates, self.dates[1:])):
            raise ContractError("observation dates must be strictly increasing")
        if any(not h > 0 for h in self.barriers) or any(not k > 0 for k in self.strikes):
            raise ContractError("barriers and strikes must be positive")
        if self.style not in STYLES:
            raise ContractError(f"unknown coupon style {self.style!r}")

    def required_dates(self, calendar: RollCalendar | None = None) -> list[date]:
        return list(self.dates)


@dataclass(frozen=True)
class AthenaSpec:
    autocall_date: date
    maturity: date
    premium: float = 0.05
    coupon: float = 0.025
    participation: float = 1.5
    barrier: float = 0.7
    coupon_date: date | None = None
    underlier: object = INDEX
    reference_level: float | None = None

    def __post_init__(self):
        if not 0 < self.barrier < 1:
            raise ContractError("protection barrier must lie in (0, 1)")
        if self.participation < 0:
            raise ContractError("participation must be non-negative")
        if not self.autocall_date < self.maturity:
            raise ContractError("autocall date must precede maturity")

    @property
    def payment_date(self) -> date:
        return self.coupon_date or self.autocall_date

    def required_dates(self, calendar: RollCalendar | None = None) -> list[date]:
        return sorted({self.autocall_date, self.maturity})


@dataclass(frozen=True)
class KnockInSpec:
    """Down-and-in (or up-and-in) vanilla with daily observation on ``[start, expiry]``."""

    start: date
    expiry: date
    barrier: float = 0.7
    strike: float = 1.0
    option: str = "put"
    direction: str = "down"
    underlier: object = INDEX
    reference_level: float | None = None

    def __post_init__(self):
        if self.barrier < 0 or self.strike <= 0:
            raise ContractError("barrier must be non-negative and strike positive")
        if self.option not in ("put", "call") or self.direction not in ("down", "up"):
            raise ContractError("option must be put/call and direction down/up")
        if not self.start <= self.expiry:
            raise ContractError("observation window is empty")

    def required_dates(self, calendar: RollCalendar | None = None) -> list[date]:
        return (calendar or RollCalendar()).business_days(self.start, self.expiry)


@dataclass(frozen=True)
class VanillaSpec:
    """European payoff on the index or one futures. ``kind='asset'`` pays ``S_T`` itself."""

    expiry: date
    strike: float = 0.0
    kind: str = "call"
    underlier: object = INDEX

    def __post_init__(self):
        if self.kind not in ("call", "put", "asset"):
            raise ContractError(f"unknown vanilla kind {self.kind!r}")

    def required_dates(self, calendar: RollCalendar | None = None) -> list[date]:
        return [self.expiry]


@dataclass(frozen=True)
class ConstantSpec:
    """Pays a fixed amount at ``payment_date`` (a model-independent control)."""

    payment_date: date
    amount: float = 1.0
    underlier: object = INDEX

    def required_dates(self, calendar: RollCalendar | None = None) -> list[date]:
        return [self.payment_date]


# ---------------------------------------------------------------------------
# Pathwise evaluation
# ---------------------------------------------------------------------------

def _observations(spec, bundle: PathBundle, dates: Sequence[date]) -> np.ndarray:
    missing = [d for d in dates if d not in bundle.store_dates]
    if missing:
        raise ContractError(f"observation dates missing from the simulation grid: {missing[:3]}")
    if spec.underlier == INDEX:
        return np.stack([bundle.index_at(d) for d in dates], axis=1)
    return np.stack([bundle.futures_at(d, spec.underlier) for d in dates], axis=1)


def _reference(spec, bundle: PathBundle) -> float:
    if getattr(spec, "reference_level", None) is not None:
        return float(spec.reference_level)
    if spec.underlier == INDEX:
        return bundle.index_level
    raise ContractError("futures-based contracts need an explicit reference level")


@dataclass
class AutocallCashflows:
    """Per-path cash flows: coupons ``(N, M)`` and the termination step/amount."""

    coupons: np.ndarray
    termination: np.ndarray
    redemption: np.ndarray

    def discounted(self, dfs: np.ndarray) -> np.ndarray:
        n = len(self.termination)
        return self.coupons @ dfs + self.redemption * dfs[self.termination] if n else np.empty(0)


def autocallable_cashflows(spec: AutocallableSpec, S: np.ndarray, reference_level: float,
                           policy: ComparisonPolicy = DEFAULT_POLICY) -> AutocallCashflows:
    """Evaluate ``sum_i gamma_i J_i + J_{i-1} (1 - J_i)(beta_i + phi_i)`` path by path.

    ``S`` has shape ``(N, M)`` with the underlying on each observation date.
    The rebate equals the coupon and ``phi`` is 1 on early redemption, and
    ``min(1, S/H_M)`` (via the final barrier) at the last date. With
    ``spec.termination_coupon`` the coupon weight is ``J_{i-1}`` instead of
    ``J_i``, so a terminating path receives coupon plus rebate.
    """
    S = np.asarray(S, dtype=float)
    N, M = S.shape
    H = np.asarray(spec.barriers) * reference_level
    K = np.asarray(spec.strikes) * reference_level
    hit = policy.coupon(S, K[None, :])
    if spec.style == "bullet":
        gamma = np.full((N, M), spec.coupon)
    elif spec.style == "digital":
        gamma = spec.coupon * hit
    else:
        last = np.zeros(N, dtype=int)
        gamma = np.empty((N, M))
        for i in range(M):
            gamma[:, i] = (i + 1 - last) * spec.coupon * hit[:, i]
            last = np.where(hit[:, i], i + 1, last)
    below = ~policy.autocalled(S, H[None, :])
    J = np.cumprod(below, axis=1).astype(float)
    J[:, -1] = 0.0
    J_prev = np.hstack([np.ones((N, 1)), J[:, :-1]])
    stop = J_prev * (1.0 - J)
    phi = np.ones((N, M))
    final = S[:, -1]
    phi[:, -1] = np.where(final >= H[-1], 1.0, final / H[-1])
    alive = J_prev if spec.termination_coupon else J
    coupons = gamma * alive + stop * gamma
    termination = np.argmax(stop > 0, axis=1)
    redemption = phi[np.arange(N), termination]
    return AutocallCashflows(coupons, termination, redemption)


def autocallable_values(spec: AutocallableSpec, bundle: PathBundle, discount: DiscountCurve,
                        policy: ComparisonPolicy = DEFAULT_POLICY) -> np.ndarray:
    S = _observations(spec, bundle, spec.dates)
    cf = autocallable_cashflows(spec, S, _reference(spec, bundle), policy)
    return cf.discounted(np.array([discount.df(d) for d in spec.dates]))


def price_autocallable(spec: AutocallableSpec, bundle: PathBundle, discount: DiscountCurve,
                       policy: ComparisonPolicy = DEFAULT_POLICY) -> PriceResult:
    return mc_estimate(autocallable_values(spec, bundle, discount, policy))


def athena_payoff(spec: AthenaSpec, I_call, I_mat, reference_level: float, df_call: float, df_coupon: float,
                  df_mat: float, policy: ComparisonPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Discounted Athena cash flows per path."""
    I_call, I_mat = np.asarray(I_call, float), np.asarray(I_mat, float)
    called = policy.athena_called(I_call, reference_level)
    perf = I_mat / reference_level
    final = np.where(perf >= 1.0, 1.0 + spec.participation * (perf - 1.0),
                     np.where(perf >= spec.barrier, 1.0, perf))
    alive = spec.coupon * df_coupon + final * df_mat
    return np.where(called, (1.0 + spec.premium) * df_call, alive)


def athena_values(spec: AthenaSpec, bundle: PathBundle, discount: DiscountCurve,
                  policy: ComparisonPolicy = DEFAULT_POLICY) -> np.ndarray:
    S = _observations(spec, bundle, [spec.autocall_date, spec.maturity])
    return athena_payoff(spec, S[:, 0], S[:, 1], _reference(spec, bundle), discount.df(spec.autocall_date),
                         discount.df(spec.payment_date), discount.df(spec.maturity), policy)


def price_athena(spec: AthenaSpec, bundle: PathBundle, discount: DiscountCurve,
                 policy: ComparisonPolicy = DEFAULT_POLICY) -> PriceResult:
    return mc_estimate(athena_values(spec, bundle, discount, policy))


def knock_in_payoff(spec: KnockInSpec, S: np.ndarray, reference_level: float,
                    policy: ComparisonPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Undiscounted payoff per path; ``S`` holds every observation day, the last being expiry."""
    S = np.asarray(S, dtype=float)
    B, K = spec.barrier * reference_level, spec.strike * reference_level
    if spec.direction == "down":
        knocked = policy.knocked_down(S, B).any(axis=1)
    else:
        knocked = (S >= B).any(axis=1) if policy.knock_in_inclusive else (S > B).any(axis=1)
    ST = S[:, -1]
    vanilla = np.maximum(K - ST, 0.0) if spec.option == "put" else np.maximum(ST - K, 0.0)
    return knocked * vanilla / reference_level


def knock_in_values(spec: KnockInSpec, bundle: PathBundle, discount: DiscountCurve,
                    calendar: RollCalendar | None = None, policy: ComparisonPolicy = DEFAULT_POLICY) -> np.ndarray:
    S = _observations(spec, bundle, spec.required_dates(calendar))
    return discount.df(spec.expiry) * knock_in_payoff(spec, S, _reference(spec, bundle), policy)


def price_knock_in(spec: KnockInSpec, bundle: PathBundle, discount: DiscountCurve,
                   calendar: RollCalendar | None = None, policy: ComparisonPolicy = DEFAULT_POLICY) -> PriceResult:
    return mc_estimate(knock_in_values(spec, bundle, discount, calendar, policy))


def vanilla_values(spec: VanillaSpec, bundle: PathBundle, discount: DiscountCurve) -> np.ndarray:
    S = _observations(spec, bundle, [spec.expiry])[:, 0]
    if spec.kind == "asset":
        pay = S
    elif spec.kind == "call":
        pay = np.maximum(S - spec.strike, 0.0)
    else:
        pay = np.maximum(spec.strike - S, 0.0)
    return discount.df(spec.expiry) * pay


def price_vanilla(spec: VanillaSpec, bundle: PathBundle, discount: DiscountCurve) -> PriceResult:
    return mc_estimate(vanilla_values(spec, bundle, discount))


def pathwise_values(spec, bundle: PathBundle, discount: DiscountCurve, calendar: RollCalendar | None = None,
                    policy: ComparisonPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Discounted value of every path for any supported contract."""
    if isinstance(spec, AutocallableSpec):
        return autocallable_values(spec, bundle, discount, policy)
    if isinstance(spec, AthenaSpec):
        return athena_values(spec, bundle, discount, policy)
    if isinstance(spec, KnockInSpec):
        return knock_in_values(spec, bundle, discount, calendar, policy)
    if isinstance(spec, VanillaSpec):
        return vanilla_values(spec, bundle, discount)
    if isinstance(spec, ConstantSpec):
        return np.full(bundle.n_paths, spec.amount * discount.df(spec.payment_date))
    raise ContractError(f"unsupported contract {type(spec).__name__}")


def price_contract(spec, bundle: PathBundle, discount: DiscountCurve, calendar: RollCalendar | None = None,
                   policy: ComparisonPolicy = DEFAULT_POLICY) -> PriceResult:
    return mc_estimate(pathwise_values(spec, bundle, discount, calendar, policy))


def with_reference_level(spec, level: float):
    """Copy of ``spec`` with barriers pinned to ``level`` (no-op for contracts without one)."""
    if hasattr(spec, "reference_level"):
        from dataclasses import replace
        return replace(spec, reference_level=float(level))
    return spec


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RatioResult:
    ratio: float
    std_error: float
    relevant: bool
    reliable: bool


@dataclass(frozen=True)
class DifferenceReport:
    v_micro: PriceResult
    v_macro: PriceResult
    dv_micro: PriceResult
    dv_macro: PriceResult
    vs_macro: RatioResult
    vs_micro: RatioResult

    def rows(self) -> list[tuple[str, float, float]]:
        return [
            ("V_macro", self.v_macro.value, self.v_macro.std_error),
            ("V_micro", self.v_micro.value, self.v_micro.std_error),
            ("dV_macro", self.dv_macro.value, self.dv_macro.std_error),
            ("dV_micro", self.dv_micro.value, self.dv_micro.std_error),
            ("(V_micro-V_macro)/dV_macro", self.vs_macro.ratio, self.vs_macro.std_error),
            ("(V_micro-V_macro)/dV_micro", self.vs_micro.ratio, self.vs_micro.std_error),
        ]

    def to_dict(self) -> dict:
        return {
            "rows": [{"quantity": q, "value": v, "std_error": s} for q, v, s in self.rows()],
            "vs_macro": asdict(self.vs_macro),
            "vs_micro": asdict(self.vs_micro),
        }


def _ratio(diff: float, diff_se: float, dv: PriceResult) -> RatioResult:
    if dv.value == 0:
        return RatioResult(math.nan, math.nan, False, False)
    r = diff / dv.value
    se = math.sqrt(diff_se**2 + (r * dv.std_error) ** 2) / abs(dv.value)
    reliable = abs(dv.value) >= RELIABILITY_SIGMAS * dv.std_error
    return RatioResult(r, se, abs(r) >= RELEVANCE_THRESHOLD, reliable)


def model_difference_ratio(v_micro: PriceResult, v_macro: PriceResult, dv_micro: PriceResult,
                           dv_macro: PriceResult) -> DifferenceReport:
    """Price gap between the models measured in units of each model's 1-vol-point price move.

    Standard errors are propagated to first order treating the four inputs
    as independent; a ratio is *relevant* when ``|ratio| >= 0.5`` and
    *unreliable* when its denominator is within five standard errors of 0.
    """
    diff = v_micro.value - v_macro.value
    diff_se = math.sqrt(v_micro.std_error**2 + v_macro.std_error**2)
    return DifferenceReport(v_micro, v_macro, dv_micro, dv_macro, _ratio(diff, diff_se, dv_macro),
                            _ratio(diff, diff_se, dv_micro))


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _d(s) -> date:
    return date.fromisoformat(s)


def _underlier_from(obj):
    u = obj.get("underlier", INDEX)
    return INDEX if u == INDEX else _d(u)


def contract_from_dict(obj: dict):
    kind = obj.get("type")
    try:
        if kind == "autocallable":
            return AutocallableSpec(tuple(map(_d, obj["dates"])), tuple(obj["barriers"]), tuple(obj["strikes"]),
                                    float(obj["coupon"]), obj.get("style", "bullet"), _underlier_from(obj),
                                    obj.get("reference_level"), bool(obj.get("termination_coupon", True)))
        if kind == "athena":
            return AthenaSpec(_d(obj["dates"][0]), _d(obj["dates"][1]), obj.get("premium", 0.05),
                              obj.get("coupon", 0.025), obj.get("participation", 1.5),
                              obj.get("barriers", [0.7])[0],
                              _d(obj["coupon_date"]) if obj.get("coupon_date") else None, _underlier_from(obj),
                              obj.get("reference_level"))
        if kind == "knockin":
            return KnockInSpec(_d(obj["dates"][0]), _d(obj["dates"][1]), obj.get("barriers", [0.7])[0],
                               obj.get("strikes", [1.0])[0], obj.get("option", "put"), obj.get("direction", "down"),
                               _underlier_from(obj), obj.get("reference_level"))
        if kind == "vanilla":
            return VanillaSpec(_d(obj["dates"][0]), obj.get("strikes", [0.0])[0], obj.get("style", "call"),
                               _underlier_from(obj))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed {kind} contract: {exc}") from None
    raise ContractError(f"unknown contract type {kind!r}")


def contract_to_dict(spec) -> dict:
    u = spec.underlier if spec.underlier == INDEX else spec.underlier.isoformat()
    if isinstance(spec, AutocallableSpec):
        out = {"type": "autocallable", "dates": [d.isoformat() for d in spec.dates], "barriers": list(spec.barriers),
               "strikes": list(spec.strikes), "coupon": spec.coupon, "style": spec.style,
               "termination_coupon": spec.termination_coupon}
    elif isinstance(spec, AthenaSpec):
        out = {"type": "athena", "dates": [spec.autocall_date.isoformat(), spec.maturity.isoformat()],
               "barriers": [spec.barrier], "coupon": spec.coupon, "premium": spec.premium,
               "participation": spec.participation}
        if spec.coupon_date:
            out["coupon_date"] = spec.coupon_date.isoformat()
    elif isinstance(spec, KnockInSpec):
        out = {"type": "knockin", "dates": [spec.start.isoformat(), spec.expiry.isoformat()],
               "barriers": [spec.barrier], "strikes": [spec.strike], "option": spec.option,
               "direction": spec.direction}
    elif isinstance(spec, VanillaSpec):
        out = {"type": "vanilla", "dates": [spec.expiry.isoformat()], "strikes": [spec.strike], "style": spec.kind}
    else:
        raise ContractError(f"cannot serialize {type(spec).__name__}")
    out["underlier"] = u
    if getattr(spec, "reference_level", None) is not None:
        out["reference_level"] = spec.reference_level
    return out


def load_contract(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from None
    return contract_from_dict(obj)


def save_contract(spec, path) -> None:
    Path(path).write_text(json.dumps(contract_to_dict(spec), indent=2) + "\n")
