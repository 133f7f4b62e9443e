"""Shared pieces of the bounded derivative-free optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``[lower_r, upper_r]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("lower bound above upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def clamp(self, x) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(x, dtype=float), self.lower), self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def at_bound(self, x, rtol: float = 1e-6) -> np.ndarray:
        tol = rtol * np.maximum(self.width, 1e-300)
        return (np.abs(x - self.lower) <= tol) | (np.abs(x - self.upper) <= tol)


@dataclass
class OptimizerReport:
    x: np.ndarray
    fun: float
    nfev: int
    reason: str
    phases: list = field(default_factory=list)
    n_nonfinite: int = 0
    history: np.ndarray = field(default_factory=lambda: np.empty(0))
    points: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "x": [float(v) for v in self.x],
            "fun": float(self.fun),
            "nfev": int(self.nfev),
            "reason": self.reason,
            "n_nonfinite": int(self.n_nonfinite),
            "phases": [{k: (v if not isinstance(v, np.ndarray) else v.tolist()) for k, v in p.items()}
                       for p in self.phases],
        }


class BudgetExhausted(Exception):
    pass


class TrackedObjective:
    """Counts evaluations, clamps into the box and maps non-finite values to +inf."""

    def __init__(self, f: Callable, domain: BoxDomain, budget: int, record_points: bool = True):
        self.f = f
        self.domain = domain
        self.budget = int(budget)
        self.values: list[float] = []
        self.points: list[np.ndarray] = []
        self.record_points = record_points
        self.n_nonfinite = 0
        self.best_x: np.ndarray | None = None
        self.best_f = np.inf

    @property
    def nfev(self) -> int:
        return len(self.values)

    @property
    def remaining(self) -> int:
        return self.budget - self.nfev

    def _sanitize(self, v) -> float:
        try:
            v = float(v)
        except (TypeError, ValueError):
            v = np.nan
        if not np.isfinite(v):
            self.n_nonfinite += 1
            return np.inf
        return v

    def _record(self, x: np.ndarray, v: float) -> None:
        self.values.append(v)
        if self.record_points:
            self.points.append(x.copy())
        if v < self.best_f or self.best_x is None:
            self.best_f, self.best_x = v, x.copy()

    def __call__(self, x) -> float:
        if self.remaining <= 0:
            raise BudgetExhausted
        x = self.domain.clamp(x)
        v = self._sanitize(self.f(x))
        self._record(x, v)
        return v

    def evaluate_many(self, xs, map_fn: Callable | None = None) -> np.ndarray:
        """Evaluate a batch (possibly concurrently); recording happens in batch order."""
        xs = [self.domain.clamp(x) for x in xs]
        if len(xs) > self.remaining:
            raise BudgetExhausted
        raw = list(map_fn(self.f, xs)) if map_fn is not None else [self.f(x) for x in xs]
        out = np.empty(len(xs))
        for i, (x, v) in enumerate(zip(xs, raw)):
            out[i] = self._sanitize(v)
            self._record(x, out[i])
        return out

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.values)) if self.values else np.empty(0)

    def report(self, reason: str, phases=None) -> OptimizerReport:
        return OptimizerReport(
            x=self.best_x.copy(), fun=float(self.best_f), nfev=self.nfev, reason=reason,
            phases=list(phases or []), n_nonfinite=self.n_nonfinite, history=self.best_so_far(),
            points=np.array(self.points) if self.record_points else None,
        )
