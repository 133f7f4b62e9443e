"""Subplex: Nelder-Mead on a sequence of low-dimensional coordinate subspaces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .base import BoxDomain, BudgetExhausted, OptimizerReport, TrackedObjective


@dataclass(frozen=True)
class SubplexSettings:
    alpha: float = 1.0   # reflection
    beta: float = 0.5    # contraction
    gamma: float = 2.0   # expansion
    delta: float = 0.5   # shrink
    psi: float = 0.25    # inner simplex reduction / step reduction
    omega: float = 0.1   # bound on step rescaling
    nsmin: int = 2
    nsmax: int = 5


def _partition(order_values: np.ndarray, nsmin: int, nsmax: int) -> list[np.ndarray]:
    """Split coordinates, sorted by decreasing ``|dx|``, into subspaces."""
    n = len(order_values)
    idx = np.argsort(-np.abs(order_values), kind="stable")
    mag = np.abs(order_values)[idx]
    parts = []
    start = 0
    while start < n:
        left = n - start
        if left <= nsmax:
            parts.append(idx[start:])
            break
        best_k, best_score = None, -np.inf
        for k in range(nsmin, nsmax + 1):
            rest = left - k
            if rest < nsmin:
                break
            score = mag[start:start + k].sum() / k - mag[start + k:].sum() / rest
            if score > best_score:
                best_k, best_score = k, score
        parts.append(idx[start:start + best_k])
        start += best_k
    return parts


def _simplex_size(simplex: np.ndarray) -> float:
    return float(np.max(np.abs(simplex[1:] - simplex[0]).sum(axis=1))) if len(simplex) > 1 else 0.0


def _nelder_mead(fsub: Callable, x0: np.ndarray, f0: float, steps: np.ndarray, s: SubplexSettings):
    """Nelder-Mead until the simplex shrinks by ``psi`` of its initial size."""
    m = len(x0)
    simplex = np.vstack([x0, x0 + np.diag(steps)])
    fv = np.empty(m + 1)
    fv[0] = f0
    for i in range(1, m + 1):
        fv[i] = fsub(simplex[i])
    target = s.psi * _simplex_size(simplex)
    while True:
        order = np.argsort(fv, kind="stable")
        simplex, fv = simplex[order], fv[order]
        if _simplex_size(simplex) <= target:
            break
        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + s.alpha * (centroid - simplex[-1])
        fr = fsub(xr)
        if fr < fv[0]:
            xe = centroid + s.gamma * (xr - centroid)
            fe = fsub(xe)
            simplex[-1], fv[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < fv[-2]:
            simplex[-1], fv[-1] = xr, fr
            continue
        if fr < fv[-1]:
            xc = centroid + s.beta * (xr - centroid)
        else:
            xc = centroid + s.beta * (simplex[-1] - centroid)
        fc = fsub(xc)
        if fc < min(fr, fv[-1]):
            simplex[-1], fv[-1] = xc, fc
            continue
        for i in range(1, m + 1):
            simplex[i] = simplex[0] + s.delta * (simplex[i] - simplex[0])
            fv[i] = fsub(simplex[i])
    i = int(np.argmin(fv))
    return simplex[i], fv[i]


def subplex_minimize(f: Callable, domain: BoxDomain, x0, scale=None, budget: int = 10000, tol: float = 1e-8,
                     settings: SubplexSettings = SubplexSettings()) -> OptimizerReport:
    """Minimize ``f`` from ``x0`` inside ``domain``.

    Parameters
    ----------
    scale : float or array, optional
        Initial step per coordinate; defaults to 10% of the box width.
    tol : float
        Relative step tolerance; stops once
        ``max(|dx_i|, psi*|step_i|) / max(|x_i|, 1) <= tol`` for all ``i``.
    """
    x = np.asarray(x0, dtype=float).copy()
    if not domain.contains(x):
        raise ValueError("starting point outside the domain")
    n = domain.dim
    step = np.broadcast_to(np.asarray(0.1 * domain.width if scale is None else scale, dtype=float), (n,)).copy()
    step[step == 0] = 1e-3 * np.maximum(np.abs(x[step == 0]), 1.0)
    nsmin, nsmax = min(settings.nsmin, n), min(settings.nsmax, n)
    if nsmin > nsmax:
        raise ValueError("nsmin must not exceed nsmax")
    obj = TrackedObjective(f, domain, budget)
    reason = "tolerance"
    iterations = 0
    try:
        fx = obj(x)
        dx = step.copy()
        first = True
        while True:
            if not first:
                if n > 1:
                    factor = np.clip(np.abs(dx).sum() / np.abs(step).sum(), settings.omega, 1.0 / settings.omega)
                else:
                    factor = settings.psi
                step = np.where(dx != 0, np.sign(dx) * np.abs(step), -step) * factor
            x_prev = x.copy()
            for part in _partition(dx, nsmin, nsmax):
                def fsub(y, part=part):
                    z = x.copy()
                    z[part] = y
                    return obj(z)
                y, fy = _nelder_mead(fsub, x[part], fx, step[part], settings)
                if fy <= fx:
                    x[part] = y
                    x = domain.clamp(x)
                    fx = fy
            dx = x - x_prev
            iterations += 1
            first = False
            crit = np.maximum(np.abs(dx), settings.psi * np.abs(step)) / np.maximum(np.abs(x), 1.0)
            if np.all(crit <= tol):
                break
    except BudgetExhausted:
        reason = "budget"
    rep = obj.report(reason)
    rep.phases = [{"phase": "subplex", "nfev": rep.nfev, "fun": rep.fun, "iterations": iterations,
                   "reason": reason}]
    return rep
