"""Occupation-measure relaxations and sample-and-hold synthesis for PWA optimal control."""

from pwamc.polynomial import Polynomial, monomials_up_to, parse_polynomial
from pwamc.problem import PwaOcp, builtin_example, parse_problem, render_problem
from pwamc.relaxation import OrderResult, hierarchy, solve_order
from pwamc.policy import PolicyConfig, PolicyRun, RunStatus, run_policy

__version__ = "0.1.0"

__all__ = [
    "Polynomial",
    "monomials_up_to",
    "parse_polynomial",
    "PwaOcp",
    "builtin_example",
    "parse_problem",
    "render_problem",
    "OrderResult",
    "hierarchy",
    "solve_order",
    "PolicyConfig",
    "PolicyRun",
    "RunStatus",
    "run_policy",
    "__version__",
]
