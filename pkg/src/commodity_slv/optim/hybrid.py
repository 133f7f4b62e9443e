"""Global ESCH search followed by local Subplex refinement."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .base import BoxDomain, OptimizerReport
from .esch import esch_minimize
from .subplex import subplex_minimize


def hybrid_minimize(f: Callable, domain: BoxDomain, seed: int = 0, global_budget: int = 10000,
                    local_budget: int = 10000, np_: int = 40, no: int = 60, tol: float = 1e-8,
                    map_fn: Callable | None = None) -> OptimizerReport:
    """Run :func:`esch_minimize` then :func:`subplex_minimize` from its best point."""
    g = esch_minimize(f, domain, np_=np_, no=no, budget=global_budget, seed=seed, map_fn=map_fn)
    loc = subplex_minimize(f, domain, g.x, scale=0.1 * domain.width, budget=local_budget, tol=tol)
    best = loc if loc.fun <= g.fun else g
    points = None
    if g.points is not None and loc.points is not None:
        points = np.vstack([g.points, loc.points])
    history = np.minimum.accumulate(np.concatenate([g.history, np.minimum(loc.history, g.fun)]))
    return OptimizerReport(
        x=best.x.copy(), fun=best.fun, nfev=g.nfev + loc.nfev, reason=loc.reason,
        phases=g.phases + loc.phases, n_nonfinite=g.n_nonfinite + loc.n_nonfinite,
        history=history, points=points,
    )
