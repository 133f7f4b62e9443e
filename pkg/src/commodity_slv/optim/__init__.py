from .base import BoxDomain, OptimizerReport
from .esch import esch_minimize
from .hybrid import hybrid_minimize
from .subplex import SubplexSettings, subplex_minimize

__all__ = ["BoxDomain", "OptimizerReport", "SubplexSettings", "esch_minimize", "hybrid_minimize",
           "subplex_minimize"]
