"""ESCH: elitist evolutionary search with Cauchy mutation on a bounded box."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .base import BoxDomain, BudgetExhausted, OptimizerReport, TrackedObjective

MUTATION_SCALE = 0.1


def esch_minimize(f: Callable, domain: BoxDomain, np_: int = 40, no: int = 60, budget: int = 5000,
                  seed: int = 0, mutation_scale: float = MUTATION_SCALE,
                  map_fn: Callable | None = None) -> OptimizerReport:
    """Minimize ``f`` over ``domain`` with a parents/offspring evolution strategy.

    Parameters
    ----------
    np_, no : int
        Number of parents and offspring per generation.
    budget : int
        Maximum number of objective evaluations, at least ``np_ + no``. The
        last generation is truncated so that exactly ``budget`` evaluations
        are spent.
    mutation_scale : float
        Cauchy scale as a fraction of the box width.
    map_fn : callable, optional
        ``map``-like function used to evaluate a generation (for example
        ``executor.map``). Selection only happens once the full generation is
        back, so results do not depend on scheduling.
    """
    if np_ < 1 or no < 1:
        raise ValueError("need at least one parent and one offspring")
    if budget < np_ + no:
        raise ValueError(f"budget {budget} below one generation ({np_ + no})")
    rng = np.random.default_rng(seed)
    R = domain.dim
    obj = TrackedObjective(f, domain, budget)
    width = domain.width

    parents = domain.lower + rng.random((np_, R)) * width
    fit = obj.evaluate_many(parents, map_fn)
    generations = 0
    while obj.remaining > 0:
        n_off = min(no, obj.remaining)
        a = rng.integers(np_, size=n_off)
        b = rng.integers(np_, size=n_off)
        cut = rng.integers(0, R + 1, size=n_off)
        coord = rng.integers(R, size=n_off)
        jump = rng.standard_cauchy(n_off)
        cols = np.arange(R)
        children = np.where(cols[None, :] < cut[:, None], parents[a], parents[b])
        children[np.arange(n_off), coord] += mutation_scale * width[coord] * jump
        children = domain.clamp(children)
        try:
            cfit = obj.evaluate_many(children, map_fn)
        except BudgetExhausted:  # pragma: no cover - n_off never exceeds remaining
            break
        pool = np.vstack([parents, children])
        pool_fit = np.concatenate([fit, cfit])
        keep = np.argsort(pool_fit, kind="stable")[:np_]
        parents, fit = pool[keep], pool_fit[keep]
        generations += 1
    rep = obj.report("budget")
    rep.phases = [{"phase": "esch", "nfev": rep.nfev, "fun": rep.fun, "generations": generations}]
    return rep
