"""Monte Carlo kernel for the futures-curve (micro) and index (macro) SLV models.

Random numbers come from counter-based Philox streams keyed by
``(seed, tag)``; paths are split in fixed blocks of ``BLOCK_SIZE`` and block
``b`` always draws from counter ``(0, 0, b, 0)``. Blocks can therefore be
generated by any number of threads without changing a single bit.

Leverage is either estimated on the fly with the particle method
(``L = Lhat / sqrt(E[v+ | X])`` at each step, evaluated on a price grid
spanning the particles) or read from a frozen :class:`LeverageSurface`.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .index_engine import holding_state
from .localvol_calib import LeverageSurface, futures_localvol
from .market_data import FuturesCurve, RollCalendar, ValidationError, year_fraction
from .pde_solver import LocalVolGrid

log = logging.getLogger(__name__)

BLOCK_SIZE = 8192
KERNEL_CONST = 15.0 / 16.0
DENOM_FLOOR = 1e-12
CV_FLOOR, CV_CAP = 1e-8, 1e3
GRID_NODES = 101

TAG_CALIBRATION = 1
TAG_PRICING = 2


class SimulationError(ArithmeticError):
    def __init__(self, step: int, path: int, message: str):
        self.step, self.path = step, path
        super().__init__(f"step {step}, path {path}: {message}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MicroParams:
    """Stochastic parameters of the futures-curve model.

    ``kappa``, ``theta`` and ``v0`` default to the fixed value 1 so the
    variance is a mean-one multiplier of the local volatility.
    """

    a: float
    beta: float
    chi: float
    rho: float
    kappa: float = 1.0
    theta: float = 1.0
    v0: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.beta <= 0:
            raise ValueError("need a >= 0 and beta > 0")
        if self.kappa <= 0 or self.theta <= 0 or self.v0 <= 0 or self.chi < 0:
            raise ValueError("variance parameters must be positive")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("correlation outside [-1, 1]")

    def feller(self) -> bool:
        return 2 * self.kappa * self.theta >= self.chi**2


@dataclass(frozen=True)
class MacroParams:
    theta: float
    chi: float
    rho: float
    v0: float
    kappa: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0 or self.theta < 0 or self.v0 < 0 or self.chi < 0:
            raise ValueError("variance parameters must be non-negative (kappa positive)")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("correlation outside [-1, 1]")

    def feller(self) -> bool:
        return 2 * self.kappa * self.theta >= self.chi**2


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationSpec:
    """Correlation of the ``2 M`` drivers ``(W^F_1..W^F_M, W^v_1..W^v_M)``.

    Futures drivers have ``corr(W^F_i, W^F_j) = exp(-beta |T_i - T_j|)``.
    The futures/variance block is handled by ``cross``:

    ``"diagonal"``
        ``corr(W^F_i, W^v_j) = rho * delta_ij`` with independent variance
        drivers. Only feasible when ``rho`` is small relative to the
        futures correlation (Cholesky failure raises).
    ``"induced"``
        ``W^v_i = rho W^F_i + sqrt(1 - rho^2) Z_i``. Always feasible; the
        variance drivers inherit ``rho^2`` times the futures correlation.
    ``"auto"``
        ``"diagonal"`` when positive definite, else ``"induced"``.
    """

    beta: float
    rho: float
    maturities: tuple
    cross: str = "auto"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("de-correlation parameter must be positive")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("correlation outside [-1, 1]")
        if self.cross not in ("auto", "diagonal", "induced"):
            raise ValueError(f"unknown cross-correlation mode {self.cross!r}")
        object.__setattr__(self, "maturities", tuple(float(t) for t in self.maturities))

    def futures_matrix(self) -> np.ndarray:
        t = np.asarray(self.maturities)
        return np.exp(-self.beta * np.abs(t[:, None] - t[None, :]))

    def matrix(self, mode: str) -> np.ndarray:
        R = self.futures_matrix()
        M = len(R)
        I = np.eye(M)
        if mode == "diagonal":
            return np.block([[R, self.rho * I], [self.rho * I, I]])
        return np.block([[R, self.rho * R], [self.rho * R, self.rho**2 * R + (1 - self.rho**2) * I]])

    def cholesky(self) -> tuple[np.ndarray, str]:
        """Lower Cholesky factor of the full matrix and the mode actually used."""
        modes = ("diagonal", "induced") if self.cross == "auto" else (self.cross,)
        for mode in modes:
            C = self.matrix(mode)
            if mode == "induced":
                # positive semi-definite for |rho| = 1; factor the blocks directly
                Lr = np.linalg.cholesky(self.futures_matrix())
                M = len(Lr)
                L = np.zeros((2 * M, 2 * M))
                L[:M, :M] = Lr
                L[M:, :M] = self.rho * Lr
                L[M:, M:] = math.sqrt(max(1 - self.rho**2, 0.0)) * np.eye(M)
                return L, mode
            try:
                return np.linalg.cholesky(C), mode
            except np.linalg.LinAlgError:
                if self.cross == "diagonal":
                    raise np.linalg.LinAlgError(
                        f"correlation matrix not positive definite for beta={self.beta}, rho={self.rho}") from None
        raise AssertionError("unreachable")  # pragma: no cover


def block_generators(seed: int, tag: int, n_paths: int, block_size: int = BLOCK_SIZE) -> list:
    """One Philox generator per block of paths."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    n_blocks = max(1, -(-n_paths // block_size))
    key = np.array([seed, tag], dtype=np.uint64)
    return [np.random.Generator(np.random.Philox(key=key, counter=np.array([0, 0, b, 0], dtype=np.uint64)))
            for b in range(n_blocks)]


class _NormalSource:
    """Draws ``(n_paths, d)`` standard normals per step, block by block."""

    def __init__(self, seed: int, tag: int, n_paths: int, d: int, n_threads: int = 1,
                 block_size: int = BLOCK_SIZE):
        self.gens = block_generators(seed, tag, n_paths, block_size)
        self.sizes = [min(block_size, n_paths - b * block_size) for b in range(len(self.gens))]
        self.d = d
        self.pool = ThreadPoolExecutor(n_threads) if n_threads > 1 and len(self.gens) > 1 else None

    def _draw(self, b: int) -> np.ndarray:
        return self.gens[b].standard_normal((self.sizes[b], self.d))

    def next(self) -> np.ndarray:
        idx = range(len(self.gens))
        parts = list(self.pool.map(self._draw, idx)) if self.pool else [self._draw(b) for b in idx]
        return np.concatenate(parts, axis=0)

    def close(self):
        if self.pool:
            self.pool.shutdown()


def correlated_normals(spec: CorrelationSpec, n_paths: int, seed: int = 0, step: int = 0, tag: int = 0,
                       n_threads: int = 1) -> np.ndarray:
    """Correlated standard normals ``(n_paths, 2 M)`` for one time step.

    Columns ``0..M-1`` drive the futures, ``M..2M-1`` the variances.
    """
    L, _ = spec.cholesky()
    gens = block_generators(seed, tag, n_paths)
    out = []
    for b, g in enumerate(gens):
        nb = min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE)
        z = None
        for _ in range(step + 1):
            z = g.standard_normal((nb, L.shape[0]))
        out.append(z @ L.T)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Variance and particle estimator
# ---------------------------------------------------------------------------

def step_variance_full_truncation(v, kappa: float, theta: float, chi: float, dt: float, dW):
    """``v + kappa (theta - v+) dt + chi sqrt(v+) dW``; the result may be negative."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    v = np.asarray(v, dtype=float)
    vp = np.maximum(v, 0.0)
    return v + kappa * (theta - vp) * dt + chi * np.sqrt(vp) * np.asarray(dW, dtype=float)


def quartic_kernel(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, KERNEL_CONST * (1.0 - u * u) ** 2, 0.0)


def silverman_bandwidth(x: np.ndarray) -> float:
    return 1.5 * float(np.std(x)) * len(x) ** (-0.2)


def conditional_variance_estimate(x, v, query=None, bandwidth: float | None = None,
                                  counter: dict | None = None) -> np.ndarray:
    """Kernel estimate of ``E[v+ | X = q]`` at each query point.

    Particles are sorted once; each query only touches the particles inside
    the compact kernel support, so the result equals the full ``O(N^2)``
    kernel sum exactly.

    Parameters
    ----------
    x, v : ndarray, shape (N,)
        Particle states and variances (``v`` enters through its positive part).
    query : ndarray, optional
        Query points; defaults to ``x`` itself.
    bandwidth : float, optional
        Defaults to ``1.5 * std(x) * N**(-1/5)``.

    Returns
    -------
    ndarray
        Estimates clipped to ``[1e-8, 1e3]``. When the kernel weights vanish
        (or all particles coincide) the cross-sectional mean is returned and
        ``counter['kernel_fallback']`` is incremented.
    """
    x = np.asarray(x, dtype=float)
    vp = np.maximum(np.asarray(v, dtype=float), 0.0)
    if len(x) < 2:
        raise ValueError("need at least two particles")
    q = x if query is None else np.asarray(query, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    mean = float(np.mean(vp))
    counter = counter if counter is not None else {}
    if not h > 0:
        counter["kernel_fallback"] = counter.get("kernel_fallback", 0) + q.size
        return np.full(q.shape, min(max(mean, CV_FLOOR), CV_CAP))
    order = np.argsort(x, kind="stable")
    xs, vs = x[order], vp[order]
    qf = q.ravel()
    lo = np.searchsorted(xs, qf - h, side="right")
    hi = np.searchsorted(xs, qf + h, side="left")
    out = np.empty(qf.size)
    for n in range(qf.size):
        a, b = lo[n], hi[n]
        if a >= b:
            out[n] = np.nan
            continue
        u = (qf[n] - xs[a:b]) / h
        w = (1.0 - u * u) ** 2
        den = w.sum()
        out[n] = (w @ vs[a:b]) / den if den * KERNEL_CONST > DENOM_FLOOR else np.nan
    bad = np.isnan(out)
    if bad.any():
        counter["kernel_fallback"] = counter.get("kernel_fallback", 0) + int(bad.sum())
        out[bad] = mean
    low = out < CV_FLOOR
    if low.any():
        counter["variance_floored"] = counter.get("variance_floored", 0) + int(low.sum())
    return np.clip(out, CV_FLOOR, CV_CAP).reshape(q.shape)


def conditional_variance_bruteforce(x, v, query, bandwidth: float) -> np.ndarray:
    """Dense ``O(N Q)`` reference for :func:`conditional_variance_estimate`."""
    x, vp = np.asarray(x, float), np.maximum(np.asarray(v, float), 0.0)
    w = quartic_kernel((np.asarray(query, float)[:, None] - x[None, :]) / bandwidth)
    return (w @ vp) / w.sum(axis=1)


def _price_grid(x: np.ndarray, n: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(abs(lo), 1.0):
        d = 1e-8 * max(abs(lo), 1.0)
        lo, hi = lo - d, hi + d
    return np.linspace(lo, hi, n)


# ---------------------------------------------------------------------------
# Path storage
# ---------------------------------------------------------------------------

@dataclass
class PathBundle:
    """Simulated states on the stored dates.

    ``index[n, j]`` is the index on ``store_dates[j]`` for path ``n``.
    ``futures[n, j, i]`` (micro runs with ``store_futures``) is the price of
    maturity ``maturities[i]``.
    """

    reference_date: date
    store_dates: tuple
    index: np.ndarray
    index_level: float
    seed: int
    n_paths: int
    futures: np.ndarray | None = None
    maturities: tuple = ()
    variance: np.ndarray | None = None
    leverage: object = None
    diagnostics: dict = field(default_factory=dict)

    def column(self, d: date) -> int:
        try:
            return self.store_dates.index(d)
        except ValueError:
            raise KeyError(f"date {d} not stored in the path bundle") from None

    def index_at(self, d: date) -> np.ndarray:
        return self.index[:, self.column(d)]

    def futures_at(self, d: date, maturity: date) -> np.ndarray:
        if self.futures is None:
            raise KeyError("futures paths were not stored")
        return self.futures[:, self.column(d), self.maturities.index(maturity)]

    def dump_csv(self, path, max_paths: int | None = None) -> None:
        """Long-format dump ``path,date,asset,value``."""
        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "date", "asset", "value"])
            for p in range(n):
                for j, d in enumerate(self.store_dates):
                    w.writerow([p, d.isoformat(), "INDEX", repr(float(self.index[p, j]))])
                    if self.futures is not None:
                        for i, T in enumerate(self.maturities):
                            w.writerow([p, d.isoformat(), T.isoformat(), repr(float(self.futures[p, j, i]))])


def simulation_dates(reference_date: date, horizon: date, calendar: RollCalendar) -> list[date]:
    dates = calendar.business_days(reference_date, horizon)
    if not dates or dates[0] != reference_date:
        dates.insert(0, reference_date)
    return dates


def _check_finite(arr: np.ndarray, step: int, what: str):
    bad = ~np.isfinite(arr)
    if bad.any():
        path = int(np.argwhere(bad)[0][0])
        raise SimulationError(step, path, f"non-finite {what}")


def _store_index(dates: Sequence[date], store_dates: Sequence[date]) -> dict:
    pos = {d: m for m, d in enumerate(dates)}
    missing = [d for d in store_dates if d not in pos]
    if missing:
        raise ValidationError(f"store dates not on the simulation grid: {missing[:3]}")
    return {pos[d]: j for j, d in enumerate(store_dates)}


# ---------------------------------------------------------------------------
# Micro model
# ---------------------------------------------------------------------------

def simulate_micro(params: MicroParams, curve: FuturesCurve, calendar: RollCalendar, horizon: date,
                   n_paths: int, seed: int, *, lv_spot: LocalVolGrid | None = None,
                   leverage: Sequence[LeverageSurface] | None = None, index_level: float = 1.0,
                   store_dates: Sequence[date] = (), store_futures: bool = False, tag: int | None = None,
                   n_threads: int = 1, cross: str = "auto", grid_nodes: int = GRID_NODES,
                   replicate_index: bool = True) -> PathBundle:
    """Euler simulation of every futures of ``curve`` plus the replicated index.

    Exactly one of ``lv_spot`` (particle calibration run; the resulting
    frozen leverage is returned in ``bundle.leverage``) or ``leverage``
    (pricing run) must be given.

    Per step and futures ``i``::

        v_i <- v_i + kappa (theta - v_i+) dt + chi sqrt(v_i+) dW^v_i
        F_i <- F_i + L_i(t, F_i) sqrt(v_i+) dW^F_i

    Futures stop moving at their maturity. The index follows the roll
    schedule of ``calendar`` starting from ``index_level``; with
    ``replicate_index=False`` the index is skipped (stored as NaN) and the
    curve need not cover the roll pairs up to ``horizon``.
    """
    if (lv_spot is None) == (leverage is None):
        raise ValueError("give exactly one of lv_spot (calibration) or leverage (pricing)")
    if n_paths < 2:
        raise ValueError("need at least two paths")
    calibrating = lv_spot is not None
    tag = (TAG_CALIBRATION if calibrating else TAG_PRICING) if tag is None else tag
    ref = curve.reference_date
    dates = simulation_dates(ref, horizon, calendar)
    times = np.array([year_fraction(ref, d) for d in dates])
    mats = curve.maturities
    M = len(mats)
    Tm = curve.times()
    F0 = np.array(curve.prices)
    if leverage is not None and len(leverage) != M:
        raise ValueError("need one leverage surface per futures maturity")
    store = _store_index(dates, store_dates)

    # Roll schedule per step (holding state for day m+1).
    col = {T: i for i, T in enumerate(mats)}
    roll = []
    for d in (dates[1:] if replicate_index else ()):
        try:
            st = holding_state(d, mats, calendar)
        except ValidationError as exc:
            raise ValidationError(f"futures curve too short for the index up to {horizon}: {exc}") from None
        roll.append((col[st.front], col[st.second], st.alpha))

    corr = CorrelationSpec(params.beta, params.rho, tuple(Tm), cross)
    chol, mode = corr.cholesky()
    diag = {"correlation_mode": mode, "variance_floored": 0, "kernel_fallback": 0,
            "lv_extrapolated": 0, "leverage_extrapolated": 0}
    if mode != cross:
        log.info("diagonal futures/variance correlation infeasible; using induced correlation")

    F = np.tile(F0, (n_paths, 1))
    v = np.full((n_paths, M), params.v0)
    I = np.full(n_paths, float(index_level))
    S = len(store_dates)
    idx_out = np.empty((n_paths, S))
    fut_out = np.empty((n_paths, S, M)) if store_futures else None
    if 0 in store:
        idx_out[:, store[0]] = I
        if store_futures:
            fut_out[:, store[0]] = F
    n_steps = len(dates) - 1
    lev_grids = np.empty((M, n_steps, grid_nodes)) if calibrating else None
    lev_vals = np.empty((M, n_steps, grid_nodes)) if calibrating else None
    src = _NormalSource(seed, tag, n_paths, 2 * M, n_threads)
    try:
        for m in range(n_steps):
            dt = times[m + 1] - times[m]
            tmid = 0.5 * (times[m] + times[m + 1])
            z = src.next() @ chol.T
            dW = z * math.sqrt(dt)
            vp = np.maximum(v, 0.0)
            F_prev = F.copy()
            for i in range(M):
                if times[m] >= Tm[i]:
                    continue
                x = F[:, i]
                if calibrating:
                    grid = _price_grid(x, grid_nodes)
                    ev = conditional_variance_estimate(x, vp[:, i], grid, counter=diag)
                    lhat = futures_localvol(tmid, Tm[i], grid, lv_spot, params.a, F0[i], counter=diag)
                    lv_grid = lhat / np.sqrt(ev)
                    lev_grids[i, m], lev_vals[i, m] = grid, lv_grid
                    lev = np.interp(x, grid, lv_grid)
                else:
                    lev = leverage[i].at_step(m, x, diag)
                F[:, i] = x + lev * np.sqrt(vp[:, i]) * dW[:, i]
            v = step_variance_full_truncation(v, params.kappa, params.theta, params.chi, dt, dW[:, M:])
            _check_finite(F, m + 1, "futures price")
            _check_finite(v, m + 1, "variance")
            if not replicate_index:
                I = np.full(n_paths, np.nan)
                if m + 1 in store:
                    idx_out[:, store[m + 1]] = I
                    if store_futures:
                        fut_out[:, store[m + 1]] = F
                continue
            jc, jf, alpha = roll[m]
            den = alpha * F_prev[:, jc] + (1 - alpha) * F_prev[:, jf]
            num = alpha * F[:, jc] + (1 - alpha) * F[:, jf]
            bad = den <= 0
            if bad.any():
                raise SimulationError(m + 1, int(np.argmax(bad)), "non-positive roll portfolio value")
            I = I * num / den
            if m + 1 in store:
                idx_out[:, store[m + 1]] = I
                if store_futures:
                    fut_out[:, store[m + 1]] = F
    finally:
        src.close()

    lev_out = None
    if calibrating:
        lev_out = []
        for i in range(M):
            alive = times[:-1] < Tm[i]
            g, vals = lev_grids[i].copy(), lev_vals[i].copy()
            if not alive.all():
                last = int(np.flatnonzero(alive)[-1]) if alive.any() else None
                for m in np.flatnonzero(~alive):
                    if last is None:
                        g[m], vals[m] = np.linspace(-1.0, 1.0, grid_nodes), 0.0
                    else:
                        g[m], vals[m] = g[last], vals[last]
            lev_out.append(LeverageSurface(times[:-1].copy(), g, vals))
    return PathBundle(ref, tuple(store_dates), idx_out, float(index_level), seed, n_paths, fut_out, tuple(mats),
                      v.copy(), lev_out, diag)


# ---------------------------------------------------------------------------
# Macro model
# ---------------------------------------------------------------------------

def simulate_macro(params: MacroParams, reference_date: date, calendar: RollCalendar, horizon: date,
                   n_paths: int, seed: int, *, lv_index: LocalVolGrid | None = None,
                   leverage: LeverageSurface | None = None, index_level: float = 1.0,
                   lv_reference_level: float | None = None, store_dates: Sequence[date] = (),
                   tag: int | None = None, n_threads: int = 1, grid_nodes: int = GRID_NODES,
                   substeps: int = 1) -> PathBundle:
    """Euler simulation of the index SLV model.

    ``I <- I + L(t, I) I sqrt(v+) dW`` with ``L = Lhat_I(t, I/I_ref) / sqrt(E[v+|I])``
    in a calibration run (``lv_index`` given) or a frozen ``leverage``
    surface. ``leverage=LeverageSurface.constant(times, 1.0)`` gives the pure
    stochastic-volatility model. ``substeps`` subdivides each business day.
    """
    if (lv_index is None) == (leverage is None):
        raise ValueError("give exactly one of lv_index (calibration) or leverage (pricing)")
    if n_paths < 2:
        raise ValueError("need at least two paths")
    if substeps < 1:
        raise ValueError("substeps must be positive")
    calibrating = lv_index is not None
    tag = (TAG_CALIBRATION if calibrating else TAG_PRICING) if tag is None else tag
    I_ref = float(index_level if lv_reference_level is None else lv_reference_level)
    dates = simulation_dates(reference_date, horizon, calendar)
    day_times = np.array([year_fraction(reference_date, d) for d in dates])
    times = np.concatenate([np.linspace(a, b, substeps + 1)[:-1] for a, b in zip(day_times[:-1], day_times[1:])]
                           + [day_times[-1:]])
    store = {k * substeps: j for k, j in _store_index(dates, store_dates).items()}
    n_steps = len(times) - 1
    if leverage is not None and leverage.values.shape[0] < n_steps:
        raise ValueError("leverage surface has fewer steps than the simulation grid")
    rho, rho_c = params.rho, math.sqrt(max(1.0 - params.rho**2, 0.0))
    diag = {"variance_floored": 0, "kernel_fallback": 0, "lv_extrapolated": 0, "leverage_extrapolated": 0}

    I = np.full(n_paths, float(index_level))
    v = np.full(n_paths, params.v0)
    out = np.empty((n_paths, len(store_dates)))
    if 0 in store:
        out[:, store[0]] = I
    lev_g = np.empty((n_steps, grid_nodes)) if calibrating else None
    lev_v = np.empty((n_steps, grid_nodes)) if calibrating else None
    src = _NormalSource(seed, tag, n_paths, 2, n_threads)
    try:
        for m in range(n_steps):
            dt = times[m + 1] - times[m]
            tmid = 0.5 * (times[m] + times[m + 1])
            z = src.next()
            dWI = z[:, 0] * math.sqrt(dt)
            dWv = (rho * z[:, 0] + rho_c * z[:, 1]) * math.sqrt(dt)
            vp = np.maximum(v, 0.0)
            if calibrating:
                grid = _price_grid(I, grid_nodes)
                ev = conditional_variance_estimate(I, vp, grid, counter=diag)
                k = grid / I_ref
                diag["lv_extrapolated"] += int(np.count_nonzero((k < lv_index.k[0]) | (k > lv_index.k[-1])))
                lg = lv_index(tmid, k) / np.sqrt(ev)
                lev_g[m], lev_v[m] = grid, lg
                lev = np.interp(I, grid, lg)
            else:
                lev = leverage.at_step(m, I, diag)
            I = I + lev * I * np.sqrt(vp) * dWI
            v = step_variance_full_truncation(v, params.kappa, params.theta, params.chi, dt, dWv)
            _check_finite(I, m + 1, "index level")
            _check_finite(v, m + 1, "variance")
            if m + 1 in store:
                out[:, store[m + 1]] = I
    finally:
        src.close()
    lev_out = LeverageSurface(times[:-1].copy(), lev_g, lev_v) if calibrating else None
    return PathBundle(reference_date, tuple(store_dates), out, float(index_level), seed, n_paths,
                      variance=v.copy(), leverage=lev_out, diagnostics=diag)


def macro_step_times(reference_date: date, horizon: date, calendar: RollCalendar, substeps: int = 1) -> np.ndarray:
    """Start times of every macro Euler step (for building constant leverage)."""
    dates = simulation_dates(reference_date, horizon, calendar)
    t = np.array([year_fraction(reference_date, d) for d in dates])
    return np.concatenate([np.linspace(a, b, substeps + 1)[:-1] for a, b in zip(t[:-1], t[1:])])
