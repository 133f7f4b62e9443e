"""Forward PDEs for normalized call prices, Crank-Nicolson in time.

Both equations live on a uniform strike grid ``k`` in ``[0, k_max]`` with the
initial condition ``c(0, k) = (1 - k)^+``:

* spot factor (mean reverting to 1 at speed ``a``)::

      dc/dt = -a c - a (1 - k) dc/dk + 0.5 k^2 L(t,k)^2 d2c/dk2

* index (driftless)::

      dc/dt = 0.5 k^2 L(t,k)^2 d2c/dk2

Boundaries: ``c(t, 0) = 1`` and ``c(t, k_max) = 0``. Space derivatives are
central except in cells where convection dominates diffusion, which use
first-order upwinding (only near ``k = 0`` for realistic vols).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import LinAlgError, solve_banded

DEFAULT_LV_CAP = 5.0


class PDEError(ArithmeticError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class LocalVolGrid:
    """Local volatility, piecewise constant in time and linear in ``k``.

    Row ``j`` of ``values`` applies on ``(times[j-1], times[j]]`` (with
    ``times[-1]`` open ended and the first row also covering ``t <= times[0]``).
    """

    times: np.ndarray
    k: np.ndarray
    values: np.ndarray
    cap: float = DEFAULT_LV_CAP

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        k = np.asarray(self.k, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape != (len(times), len(k)):
            raise ValueError(f"values shape {values.shape} != ({len(times)}, {len(k)})")
        if np.any(np.diff(times) <= 0) or np.any(np.diff(k) <= 0):
            raise ValueError("time and k axes must be strictly increasing")
        if np.any(~np.isfinite(values)):
            raise ValueError("local volatility must be finite")
        values = np.clip(values, 0.0, self.cap)
        for name, arr in (("times", times), ("k", k), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def constant(cls, sigma: float, k_max: float = 3.0, horizon: float = 100.0) -> "LocalVolGrid":
        return cls(np.array([horizon]), np.array([0.0, k_max]), np.full((1, 2), float(sigma)))

    def slice_index(self, t) -> np.ndarray:
        return np.minimum(np.searchsorted(self.times, t, side="left"), len(self.times) - 1)

    def row(self, t: float) -> np.ndarray:
        return self.values[int(self.slice_index(t))]

    def __call__(self, t: float, k):
        """Evaluate at a single time for one or many ``k`` (flat beyond the k axis)."""
        return np.interp(k, self.k, self.row(t))

    def on_k(self, k: np.ndarray) -> "LocalVolGrid":
        """Resample onto a new k axis."""
        vals = np.array([np.interp(k, self.k, r) for r in self.values])
        return LocalVolGrid(self.times, k, vals, self.cap)


@dataclass(frozen=True)
class GridConfig:
    k_max: float = 3.0
    n_space: int = 400
    max_dt: float = 1.0 / 365.0
    rannacher_steps: int = 2

    def __post_init__(self):
        if not self.k_max > 1.0:
            raise ValueError("k_max must exceed 1 so the grid covers the forward")
        if self.n_space < 3:
            raise ValueError("at least three space nodes are required")
        if not self.max_dt > 0:
            raise ValueError("max_dt must be positive")
        if self.rannacher_steps < 0:
            raise ValueError("rannacher_steps must be non-negative")

    def k_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.k_max, self.n_space)

    def time_nodes(self, required: Sequence[float]) -> np.ndarray:
        """Uniform-ish time nodes hitting every required time exactly."""
        req = np.unique(np.concatenate([[0.0], np.asarray(required, dtype=float)]))
        if req[0] < 0:
            raise ValueError("negative time requested")
        nodes = [0.0]
        for a, b in zip(req[:-1], req[1:]):
            n = max(1, int(np.ceil((b - a) / self.max_dt - 1e-9)))
            nodes.extend(np.linspace(a, b, n + 1)[1:])
        nodes = np.array(nodes)
        nodes[np.searchsorted(nodes, req)] = req
        return nodes


@dataclass(frozen=True)
class Grid1D:
    times: np.ndarray
    k: np.ndarray
    values: np.ndarray

    def time_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-10:
            raise KeyError(f"time {t} is not a grid node")
        return i

    def at(self, t: float) -> np.ndarray:
        return self.values[self.time_index(t)]

    def price(self, t: float, k) -> np.ndarray:
        """Normalized call at node time ``t``, cubic in ``k``.

        For ``k < 0`` the call is ``1 - k`` exactly since the process is
        positive with unit mean.
        """
        row = self.at(t)
        k = np.asarray(k, dtype=float)
        spline = CubicSpline(self.k, row)
        out = np.where(k < 0, 1.0 - k, spline(np.clip(k, 0.0, self.k[-1])))
        return out

    def convexity(self) -> np.ndarray:
        h = self.k[1] - self.k[0]
        return (self.values[:, 2:] - 2 * self.values[:, 1:-1] + self.values[:, :-2]) / h**2


def cell_averaged_payoff(k: np.ndarray) -> np.ndarray:
    """``(1-k)^+`` averaged over each node's cell; removes the kink-alignment error."""
    h = k[1] - k[0]
    lo, hi = k - 0.5 * h, k + 0.5 * h
    out = np.where(hi <= 1.0, 1.0 - k, 0.0)
    mixed = (lo < 1.0) & (hi > 1.0)
    out[mixed] = (1.0 - lo[mixed]) ** 2 / (2.0 * h)
    out[0] = 1.0
    return out


def _solve(lv: LocalVolGrid, a: float, times: np.ndarray, k: np.ndarray, rannacher_steps: int) -> Grid1D:
    if a < 0:
        raise ValueError("mean reversion speed must be non-negative")
    h = k[1] - k[0]
    if not np.allclose(np.diff(k), h):
        raise ValueError("k grid must be uniform")
    P = len(k)
    ki = k[1:-1]
    # Column 0 is the call, column 1 the put E[(k - s)^+] = c - (1 - k). Both
    # solve the same equation; the put carries k < 1 without cancellation.
    left = np.array([1.0, 0.0])
    right = np.array([0.0, k[-1] - 1.0])
    u = np.empty((P, 2))
    u[:, 0] = cell_averaged_payoff(k)
    u[:, 1] = u[:, 0] - (1.0 - k)
    u[0], u[-1] = left, right
    itm = k < 1.0
    out = np.empty((len(times), P))
    out[0] = np.maximum(1.0 - k, 0.0)
    lv_k = lv if np.array_equal(lv.k, k) else lv.on_k(k)
    cache_row, cache_coeffs = None, None
    for n in range(1, len(times)):
        dt = times[n] - times[n - 1]
        j = int(lv_k.slice_index(0.5 * (times[n] + times[n - 1])))
        if j != cache_row:
            L = lv_k.values[j][1:-1]
            diff = 0.5 * ki**2 * L**2 / h**2
            adv = a * (1.0 - ki) / (2.0 * h)
            # upwind where convection dominates (cell Peclet > 1) to keep the M-matrix sign pattern
            up = np.abs(adv) > diff
            lower = np.where(up, diff + np.maximum(2.0 * adv, 0.0), diff + adv)[:, None]
            upper = np.where(up, diff + np.maximum(-2.0 * adv, 0.0), diff - adv)[:, None]
            diag = np.where(up, -2.0 * diff - 2.0 * np.abs(adv), -2.0 * diff)[:, None] - a
            cache_row, cache_coeffs = j, (lower, diag, upper)
        lower, diag, upper = cache_coeffs
        substeps = 2 if n <= rannacher_steps else 1
        theta = 1.0 if n <= rannacher_steps else 0.5
        for _ in range(substeps):
            tau = dt / substeps
            ab = np.zeros((3, P - 2))
            ab[0, 1:] = -theta * tau * upper[:-1, 0]
            ab[1, :] = 1.0 - theta * tau * diag[:, 0]
            ab[2, :-1] = -theta * tau * lower[1:, 0]
            rhs = u[1:-1] + (1.0 - theta) * tau * (lower * u[:-2] + diag * u[1:-1] + upper * u[2:])
            rhs[0] += theta * tau * lower[0] * left
            rhs[-1] += theta * tau * upper[-1] * right
            try:
                inner = solve_banded((1, 1), ab, rhs, check_finite=False)
            except (LinAlgError, ValueError) as exc:
                raise PDEError(n, f"Crank-Nicolson system singular: {exc}") from None
            if not np.all(np.isfinite(inner)):
                raise PDEError(n, "non-finite solution")
            u[1:-1] = inner
        out[n] = np.where(itm, (1.0 - k) + u[:, 1], u[:, 0])
    return Grid1D(times, k, out)


def solve_extended_dupire(lv: LocalVolGrid, a: float, times: Sequence[float] | None = None,
                          config: GridConfig = GridConfig(), horizon: float | None = None) -> Grid1D:
    """Normalized calls ``E[(s_t - k)^+]`` of the mean-reverting spot factor.

    ``times`` are required output times (e.g. option expiries); the solver
    inserts intermediate steps of at most ``config.max_dt``.
    """
    req = list(times) if times is not None else []
    if horizon is not None:
        req.append(horizon)
    if not req:
        raise ValueError("need output times or a horizon")
    return _solve(lv, float(a), config.time_nodes(req), config.k_nodes(), config.rannacher_steps)


def solve_dupire_index(lv: LocalVolGrid, times: Sequence[float] | None = None,
                       config: GridConfig = GridConfig(), horizon: float | None = None) -> Grid1D:
    """Normalized index calls ``E[(I_t/I_0 - k)^+]`` under the driftless Dupire equation."""
    return solve_extended_dupire(lv, 0.0, times, config, horizon)
