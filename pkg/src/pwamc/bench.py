"""Analytic oracle for the built-in two-cell example and a comparison harness.

The example is ``xdot = -x + 1 + u`` on ``x >= 0`` and ``xdot = x + 1 + u`` on
``x <= 0`` with running cost ``2 (x - 1)^2 + u^2`` and target ``x = 1``.  On the
right cell the value is ``(sqrt(3) - 1)(x - 1)^2``; on the left cell the HJB
equation is a quadratic in ``v'`` whose admissible root gives the slope below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import quad, solve_ivp

from pwamc.policy import PolicyRun
from pwamc.problem import PwaOcp
from pwamc.relaxation import OrderResult

SQRT3 = math.sqrt(3.0)
RIGHT_COEF = SQRT3 - 1.0  # v = RIGHT_COEF * (x - 1)^2 on x >= 0
TARGET = 1.0
STOP_RADIUS = 1e-8


class OracleError(RuntimeError):
    pass


def analytic_feedback(x: float) -> float:
    x = float(x)
    if x >= 0.0:
        return (1.0 - SQRT3) * (x - 1.0)
    return -x - 1.0 + math.sqrt(2.0 * (x - 1.0) ** 2 + (x + 1.0) ** 2)


def analytic_slope(x: float) -> float:
    """``v*'(x)``; both branches give ``-2 (sqrt(3) - 1)`` at the boundary."""
    x = float(x)
    if x >= 0.0:
        return 2.0 * RIGHT_COEF * (x - 1.0)
    return 2.0 * (x + 1.0) - 2.0 * math.sqrt((x + 1.0) ** 2 + 2.0 * (x - 1.0) ** 2)


def analytic_value(x: float) -> float:
    """``v*(x)``: closed form on the right cell, quadrature of the slope on the left."""
    x = float(x)
    if x >= 0.0:
        return RIGHT_COEF * (x - 1.0) ** 2
    tail, _ = quad(analytic_slope, x, 0.0, epsabs=1e-13, epsrel=1e-12, limit=200)
    return RIGHT_COEF - tail


class AnalyticValue:
    """The exact value function, exposed through the policy's ``gradient_at`` hook."""

    def __call__(self, x) -> float:
        return analytic_value(np.asarray(x, dtype=float).reshape(-1)[0])

    def gradient_at(self, x, cell: int) -> np.ndarray:
        x0 = float(np.asarray(x, dtype=float).reshape(-1)[0])
        # cell 0 is x >= 0; on the boundary each cell uses its own branch
        if cell == 0:
            return np.array([2.0 * RIGHT_COEF * (x0 - 1.0)])
        return np.array([2.0 * (x0 + 1.0) - 2.0 * math.sqrt((x0 + 1.0) ** 2 + 2.0 * (x0 - 1.0) ** 2)])


def _closed_loop(t, z):
    x = z[0]
    u = analytic_feedback(x)
    fx = (-x + 1.0 + u) if x >= 0.0 else (x + 1.0 + u)
    return [fx, 2.0 * (x - 1.0) ** 2 + u * u]


def _integrate(x0: float, tol: float, t_cap: float) -> float:
    """Closed-loop cost, with the integration restarted at the cell boundary."""

    def crossing(t, z):
        return z[0]

    crossing.terminal = True

    def arrived(t, z):
        return abs(z[0] - TARGET) - STOP_RADIUS

    arrived.terminal = True
    opts = dict(method="DOP853", rtol=tol, atol=tol * 1e-3)
    z = [float(x0), 0.0]
    t0 = 0.0
    if abs(z[0] - TARGET) <= STOP_RADIUS:
        return 0.0
    if z[0] < 0.0:
        sol = solve_ivp(_closed_loop, (0.0, t_cap), z, events=[crossing], **opts)
        if sol.status != 1:
            raise OracleError(f"closed loop from x0 = {x0} did not reach x = 0 within t = {t_cap}")
        t0, z = sol.t[-1], [0.0, sol.y[1, -1]]
    sol = solve_ivp(_closed_loop, (t0, t0 + t_cap), z, events=[arrived], **opts)
    if sol.status != 1:
        raise OracleError(f"closed loop from x0 = {x0} did not reach the target within t = {t_cap}")
    return float(sol.y[1, -1])


def oracle_cost(x0: float, tol: float = 1e-10, t_cap: float = 200.0) -> float:
    """``v*(x0)`` by closed-loop integration under the analytic feedback.

    Runs at ``tol`` and ``tol / 100``; the two must agree to ``10 tol`` and the
    finer one is returned.  Also cross-checked against ``analytic_value``.
    """
    x0 = float(x0)
    if not -2.0 <= x0 <= 2.0:
        raise ValueError("x0 must lie in [-2, 2]")
    coarse = _integrate(x0, tol, t_cap)
    fine = _integrate(x0, tol / 100.0, t_cap)
    if abs(coarse - fine) > 10 * tol * (1.0 + abs(fine)):
        raise OracleError(f"oracle not converged: {coarse!r} vs {fine!r}")
    ref = analytic_value(x0)
    if abs(fine - ref) > 1e-7 * (1.0 + abs(ref)):
        raise OracleError(f"integration {fine!r} disagrees with closed form/quadrature {ref!r}")
    return fine


def hamiltonian_residual(x: float) -> float:
    """``min_u [v*'(x) f(x, u) + L(x, u)]``; zero wherever the HJB equation holds."""
    p = analytic_slope(x)
    drift = (-x + 1.0) if x >= 0.0 else (x + 1.0)
    u = -p / 2.0
    return p * (drift + u) + 2.0 * (x - 1.0) ** 2 + u * u


@dataclass
class ComparisonReport:
    x0: float
    oracle_cost: float
    lower_bound: float
    bound_order: int
    bound_gap: float
    policy_cost: float
    cost_gap: float
    feedback_sup_dev: float
    bounds: dict[int, float] = field(default_factory=dict)
    table: list[tuple[float, float, float]] = field(default_factory=list)
    policy_status: str = ""

    def to_dict(self) -> dict:
        return {
            "x0": self.x0,
            "oracle_cost": self.oracle_cost,
            "lower_bound": self.lower_bound,
            "bound_order": self.bound_order,
            "bound_gap": self.bound_gap,
            "bound_gap_relative": self.bound_gap / self.oracle_cost if self.oracle_cost else math.nan,
            "policy_cost": self.policy_cost,
            "policy_status": self.policy_status,
            "cost_gap": self.cost_gap,
            "feedback_sup_dev": self.feedback_sup_dev,
            "bounds": {str(d): b for d, b in sorted(self.bounds.items())},
            "table": [{"x": x, "u": u, "k_star": k} for x, u, k in self.table],
        }


def compare(hier: Sequence[OrderResult], run: PolicyRun, x0: float | None = None) -> ComparisonReport:
    """Bound gap of the highest solved order, cost gap and feedback deviation of ``run``."""
    start = float(run.x0[0])
    if x0 is not None and abs(float(x0) - start) > 1e-12:
        raise ValueError(f"policy run starts at {start}, comparison requested at {x0}")
    for res in hier:
        if res.relaxation is not None:
            ocp_x0 = res.relaxation.ocp.initial_measure
            if ocp_x0.kind != "dirac":
                raise ValueError("hierarchy was solved for a non-Dirac initial measure")
    solved = {r.order: r.lower_bound for r in hier if r.value is not None}
    if not solved:
        raise ValueError("no relaxation order was solved")
    best_order = max(solved)
    v_star = oracle_cost(start)
    table = [(float(p.x[0]), float(p.u[0]), analytic_feedback(p.x[0])) for p in run.points]
    dev = max((abs(u - k) for _, u, k in table), default=0.0)
    return ComparisonReport(
        x0=start,
        oracle_cost=v_star,
        lower_bound=solved[best_order],
        bound_order=best_order,
        bound_gap=v_star - solved[best_order],
        policy_cost=run.cost,
        cost_gap=run.cost - v_star,
        feedback_sup_dev=dev,
        bounds=solved,
        table=table,
        policy_status=run.status.value,
    )


def value_curves(hier: Sequence[OrderResult], ocp: PwaOcp, points: int = 201):
    """Rows ``(x, v*(x), v_d(x) for each solved order)`` and the column names."""
    xs = np.linspace(ocp.state_box[0, 0], ocp.state_box[0, 1], points)
    solved = [r for r in hier if r.value is not None]
    header = ["x", "v_star"] + [f"v_{r.order}" for r in solved]
    rows = []
    for x in xs:
        rows.append([float(x), analytic_value(x)] + [r.value.v.evaluate([x]) for r in solved])
    return header, rows


def feedback_curves(run: PolicyRun):
    """Rows ``(x_j, k*(x_j), u_j)`` at the partition points."""
    header = ["x", "k_star", "u_policy"]
    rows = [[float(p.x[0]), analytic_feedback(p.x[0]), float(p.u[0])] for p in run.points]
    return header, rows
