"""Sample-and-hold feedback synthesis from a polynomial value-function approximation.

Each interval of the time partition solves a static minimization of the
Hamiltonian ``grad v(x_j) . f_i(x_j, u) + L_i(x_j, u)`` over the input box,
holds the minimizer constant and integrates the active cell's affine dynamics
until the hold budget is spent or the state reaches a cell boundary.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
from scipy.integrate import DOP853
from scipy.optimize import brentq, minimize

from pwamc.polynomial import Polynomial
from pwamc.problem import TOL_GUARD, Cell, PwaOcp

MAX_REENTRIES = 100  # boundary re-classifications allowed inside one nominal interval


class StaticMinError(ArithmeticError):
    """The Hamiltonian could not be evaluated (overflow or NaN)."""


class IntegrationError(RuntimeError):
    """Step-size underflow or solver failure; carries the location."""

    def __init__(self, message: str, t: float, x):
        super().__init__(f"{message} at t = {t:.17g}, x = {np.asarray(x).tolist()}")
        self.t = t
        self.x = np.asarray(x, dtype=float)


class RunStatus(str, enum.Enum):
    REACHED_TARGET = "ReachedTarget"
    MAX_STEPS = "MaxSteps"
    LEFT_DOMAIN = "LeftDomain"
    CHATTERING = "Chattering"
    NUMERICAL_FAILURE = "NumericalFailure"


class Exit(str, enum.Enum):
    BOUNDARY_HIT = "BoundaryHit"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    LEFT_DOMAIN = "LeftDomain"


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    min_step: float = 1e-12

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0 and self.min_step > 0):
            raise ValueError("integrator tolerances must be positive")


@dataclass(frozen=True)
class PolicyConfig:
    diameter: float = 0.01
    epsilon: float = 0.01
    max_steps: int = 100_000
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    event_tol: float | None = None
    sample_spacing: float = 1e-3

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError("diameter must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        if not self.sample_spacing > 0:
            raise ValueError("sample_spacing must be positive")
        if self.event_tol is None:
            object.__setattr__(self, "event_tol", min(1e-10, 1e-6 * self.diameter))
        if not 0 < self.event_tol <= 1e-6 * self.diameter:
            raise ValueError("event_tol must lie in (0, 1e-6 * diameter]")

    def to_dict(self) -> dict:
        return asdict(self)


# -- value models -------------------------------------------------------------


class ValueModel(Protocol):
    def gradient_at(self, x: np.ndarray, cell: int) -> np.ndarray: ...


class PolynomialValue:
    """Adapter giving a state polynomial the ``gradient_at`` interface."""

    def __init__(self, v: Polynomial, n: int):
        if v.nvars != n:
            if v.nvars > n and not any(v.uses_variable(k) for k in range(n, v.nvars)):
                v = v.restrict(range(n))
            else:
                raise ValueError(f"value function must be a polynomial in {n} state variables")
        if v.degree < 1:
            raise ValueError("value function must have degree >= 1")
        self.v = v
        self._grad = v.gradient()

    def __call__(self, x) -> float:
        return self.v.evaluate(x)

    def gradient_at(self, x, cell: int) -> np.ndarray:
        return np.array([g.evaluate(x) for g in self._grad])


def as_value_model(v, n: int) -> ValueModel:
    if isinstance(v, Polynomial):
        return PolynomialValue(v, n)
    if hasattr(v, "gradient_at"):
        return v
    raise TypeError("value function must be a Polynomial or provide gradient_at(x, cell)")


# -- static minimization ------------------------------------------------------


def hamiltonian_in_u(cell: Cell, grad: np.ndarray, x: np.ndarray, m: int) -> Polynomial:
    """``q(u) = grad . (A x + a + B u) + L(x, u)`` as a polynomial in ``u`` alone."""
    n = x.size
    terms: dict[tuple[int, ...], float] = {}
    for mono, coef in cell.lagrangian.items():
        cx = coef * math.prod(float(x[k]) ** e for k, e in enumerate(mono[:n]) if e)
        key = tuple(mono[n:])
        terms[key] = terms.get(key, 0.0) + cx
    zero = (0,) * m
    terms[zero] = terms.get(zero, 0.0) + float(grad @ (cell.A @ x + cell.a))
    lin = grad @ cell.B
    for j in range(m):
        key = tuple(int(k == j) for k in range(m))
        terms[key] = terms.get(key, 0.0) + float(lin[j])
    return Polynomial(m, terms)


def _pick(cands: list[np.ndarray], vals: list[float]) -> tuple[np.ndarray, float]:
    vals_arr = np.asarray(vals)
    if not np.all(np.isfinite(vals_arr)):
        raise StaticMinError("Hamiltonian is not finite at a candidate input")
    best = float(vals_arr.min())
    tie = 1e-12 * (1.0 + abs(best))
    near = [k for k, val in enumerate(vals) if val <= best + tie]
    k = min(near, key=lambda i: (float(np.linalg.norm(cands[i])), tuple(cands[i])))
    return cands[k], float(vals[k])


def _univariate_min(q: Polynomial, lo: float, hi: float) -> tuple[np.ndarray, float]:
    deg = max(q.degree, 0)
    coefs = np.array([q.coefficient((k,)) for k in range(deg + 1)])
    if not np.all(np.isfinite(coefs)):
        raise StaticMinError("Hamiltonian coefficients are not finite")
    cands = [lo, hi, min(max(0.0, lo), hi)]
    dq = np.polynomial.polynomial.polyder(coefs)
    if deg >= 2 and np.any(dq != 0.0):
        d2q = np.polynomial.polynomial.polyder(dq)
        dq_t = np.trim_zeros(dq, "b")
        for r in np.polynomial.polynomial.polyroots(dq_t) if dq_t.size > 1 else []:
            if abs(r.imag) > 1e-8 * (1.0 + abs(r.real)):
                continue
            u = float(r.real)
            for _ in range(3):  # polish against the companion-matrix error
                h = np.polynomial.polynomial.polyval(u, d2q)
                if h == 0.0:
                    break
                u -= np.polynomial.polynomial.polyval(u, dq) / h
            if lo <= u <= hi:
                cands.append(u)
    vals = [float(np.polynomial.polynomial.polyval(u, coefs)) for u in cands]
    u, val = _pick([np.array([c]) for c in cands], vals)
    return u, val


def _multivariate_min(q: Polynomial, box: np.ndarray) -> tuple[np.ndarray, float]:
    m = q.nvars
    grad = q.gradient()
    lo, hi = box[:, 0], box[:, 1]

    def fun(u):
        return q.evaluate(u), np.array([g.evaluate(u) for g in grad])

    seeds = [lo + np.array(f) * (hi - lo) for f in itertools.product((1 / 6, 1 / 2, 5 / 6), repeat=m)]
    seeds += [np.array(c) for c in itertools.product(*box)]
    cands = [np.clip(np.zeros(m), lo, hi)]
    for s in seeds:
        res = minimize(fun, s, jac=True, method="L-BFGS-B", bounds=list(map(tuple, box)))
        cands.append(np.clip(res.x, lo, hi))
    cands += seeds
    return _pick(cands, [q.evaluate(c) for c in cands])


def static_min(v, cell: Cell, x, input_box, n: int | None = None) -> tuple[np.ndarray, float]:
    """Global minimizer over the input box of the held-control Hamiltonian."""
    x = np.asarray(x, dtype=float).reshape(-1)
    box = np.atleast_2d(np.asarray(input_box, dtype=float))
    m = box.shape[0]
    model = as_value_model(v, x.size if n is None else n)
    grad = np.asarray(model.gradient_at(x, cell.index), dtype=float)
    if not np.all(np.isfinite(grad)):
        raise StaticMinError(f"value gradient is not finite at x = {x.tolist()}")
    q = hamiltonian_in_u(cell, grad, x, m)
    if m == 0:
        return np.zeros(0), q.evaluate([])
    if m == 1:
        return _univariate_min(q, float(box[0, 0]), float(box[0, 1]))
    return _multivariate_min(q, box)


# -- event-detecting integration ---------------------------------------------


@dataclass
class HoldResult:
    t_end: float
    x_end: np.ndarray
    exit: Exit
    t: np.ndarray  # dense samples, first entry is the start of the hold
    x: np.ndarray
    guard: int | None = None  # index into cell guards (then state-box guards) that fired


def _guard_functions(ocp: PwaOcp, cell: Cell, u: np.ndarray):
    """Scalar functions of x: the cell's guards at fixed u, then the state-box guards."""
    funcs = []
    for g in cell.guards:
        funcs.append(lambda x, g=g: g.evaluate(np.concatenate([x, u])))
    for k in range(ocp.n):
        lo, hi = ocp.state_box[k]
        funcs.append(lambda x, k=k, lo=lo: x[k] - lo)
        funcs.append(lambda x, k=k, hi=hi: hi - x[k])
    return funcs


def integrate_hold(
    ocp: PwaOcp,
    cell: int,
    x_j,
    u,
    t_j: float,
    budget: float,
    integrator: IntegratorConfig = IntegratorConfig(),
    event_tol: float = 1e-10,
    sample_spacing: float = 1e-3,
) -> HoldResult:
    """Integrate ``xdot = A x + a + B u`` with ``u`` held, stopping at a guard crossing.

    A guard that is nonnegative at the start of an accepted step and negative
    at its end brackets a crossing; the crossing time is found by Brent's
    method on the step's dense output.
    """
    c = ocp.cells[cell]
    u = np.asarray(u, dtype=float).reshape(-1)
    x0 = np.asarray(x_j, dtype=float).reshape(-1)
    drift = c.a + c.B @ u
    A = c.A
    guards = _guard_functions(ocp, c, u)
    n_cell = len(c.guards)

    def rhs(t, x):
        return A @ x + drift

    ts, xs = [float(t_j)], [x0.copy()]
    t_end = float(t_j) + float(budget)
    prev = np.array([g(x0) for g in guards])
    # a guard already slightly negative at the start must not fire immediately
    leaving = [k for k, val in enumerate(prev) if val < -TOL_GUARD]
    if leaving:
        k = leaving[0]
        return HoldResult(float(t_j), x0, _exit_kind(k, n_cell), np.array(ts), np.array(xs), k)
    if not t_end > t_j:
        return HoldResult(float(t_j), x0, Exit.BUDGET_EXHAUSTED, np.array(ts), np.array(xs))
    # the automatic first step degenerates when the state starts at the origin
    solver = DOP853(
        rhs,
        float(t_j),
        x0,
        t_end,
        rtol=integrator.rel_tol,
        atol=integrator.abs_tol,
        first_step=min(t_end - float(t_j), 1e-3),
    )
    while solver.status == "running":
        t_old = solver.t
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"integrator failed ({msg})", t_old, solver.y)
        t_new = solver.t
        if t_new - t_old < integrator.min_step and t_new < t_end:
            raise IntegrationError("step size below min_step", t_old, solver.y)
        dense = solver.dense_output()
        cur = np.array([g(solver.y) for g in guards])
        fired = [k for k in range(len(guards)) if prev[k] >= 0.0 > cur[k]]
        if fired:
            hits = []
            speed = 1.0 + float(np.linalg.norm(rhs(t_old, xs[-1])))
            xtol = max(event_tol / speed, 4 * np.finfo(float).eps * max(1.0, abs(t_new)))
            for k in fired:
                f = lambda t, k=k: guards[k](dense(t))
                f_old = f(t_old)
                tk = t_old if f_old <= 0.0 else brentq(f, t_old, t_new, xtol=xtol)
                hits.append((tk, k))
            tk, k = min(hits)
            _dense_samples(dense, t_old, tk, sample_spacing, ts, xs)
            xk = dense(tk)
            # land on the boundary rather than a rounding error beyond it
            xs[-1] = xk
            return HoldResult(tk, xk, _exit_kind(k, n_cell), np.array(ts), np.array(xs), k)
        _dense_samples(dense, t_old, t_new, sample_spacing, ts, xs)
        xs[-1] = solver.y.copy()
        prev = cur
    return HoldResult(t_end, xs[-1], Exit.BUDGET_EXHAUSTED, np.array(ts), np.array(xs))


def _exit_kind(k: int, n_cell: int) -> Exit:
    return Exit.BOUNDARY_HIT if k < n_cell else Exit.LEFT_DOMAIN


def _dense_samples(dense, t0: float, t1: float, spacing: float, ts: list, xs: list) -> None:
    if t1 <= t0:
        return
    k = max(1, math.ceil((t1 - t0) / spacing))
    for i in range(1, k + 1):
        t = t1 if i == k else t0 + (t1 - t0) * i / k
        ts.append(t)
        xs.append(np.asarray(dense(t), dtype=float))


# -- Algorithm loop -----------------------------------------------------------


@dataclass(frozen=True)
class PartitionPoint:
    t: float
    x: np.ndarray
    cell: int
    u: np.ndarray
    hamiltonian_value: float


@dataclass
class Trajectory:
    """Dense samples; rows of one interval share ``interval`` and the held ``u``."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    cell: np.ndarray
    running_cost: np.ndarray
    interval: np.ndarray
    partition: np.ndarray  # True on the first row of each interval

    def __len__(self) -> int:
        return self.t.size


@dataclass
class PolicyRun:
    points: list[PartitionPoint]
    samples: Trajectory
    total_time: float
    cost: float
    online_running_cost: float
    terminal_cost: float
    status: RunStatus
    config: PolicyConfig
    x0: np.ndarray
    target: np.ndarray
    message: str = ""

    @property
    def steps(self) -> int:
        return len(self.points)

    @property
    def final_state(self) -> np.ndarray:
        return self.samples.x[-1]


def _trapezoid(t: np.ndarray, f: np.ndarray) -> float:
    if t.size < 2:
        return 0.0
    return math.fsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))


def _running_costs(cell: Cell, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    z = np.hstack([x, np.broadcast_to(u, (x.shape[0], u.size))])
    out = np.zeros(x.shape[0])
    for mono, coef in cell.lagrangian.items():
        term = np.full(x.shape[0], coef)
        for k, e in enumerate(mono):
            if e:
                term = term * z[:, k] ** e
        out += term
    return out


def _choose_cell(ocp: PwaOcp, model: ValueModel, x: np.ndarray):
    """Static minimization in every cell containing ``x``; prefer the cell whose
    held flow points inward (strictly, then weakly)."""
    options = []
    for cell in ocp.cells:
        z0 = np.concatenate([x, np.zeros(ocp.m)])
        state_guards = [g for g in cell.guards if not any(g.uses_variable(ocp.n + j) for j in range(ocp.m))]
        if not all(g.evaluate(z0) >= -TOL_GUARD for g in state_guards):
            continue
        u, val = static_min(model, cell, x, ocp.input_box, ocp.n)
        z = np.concatenate([x, u])
        vals = np.array([g.evaluate(z) for g in cell.guards])
        if np.any(vals < -TOL_GUARD):
            continue
        xdot = cell.vector_field(x, u)
        rates = [
            sum(g.partial_derivative(k).evaluate(z) * xdot[k] for k in range(ocp.n))
            for g, gv in zip(cell.guards, vals)
            if abs(gv) <= TOL_GUARD
        ]
        options.append((min(rates, default=math.inf), cell, u, val))
    if not options:
        return None
    score, cell, u, val = max(options, key=lambda o: o[0])
    return cell, u, val


def run_policy(ocp: PwaOcp, v, x_T=None, cfg: PolicyConfig = PolicyConfig(), x0=None) -> PolicyRun:
    """Sample-and-hold closed loop until ``||x - x_T|| <= epsilon`` or a stop condition."""
    model = as_value_model(v, ocp.n)
    x = ocp.initial_point() if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    target = ocp.terminal_point() if x_T is None else np.asarray(x_T, dtype=float).reshape(-1)
    x_start = x.copy()
    t = 0.0
    points: list[PartitionPoint] = []
    rows_t, rows_x, rows_u, rows_c, rows_L, rows_i, rows_p = [], [], [], [], [], [], []
    running = 0.0
    status, message = None, ""
    reentries, nominal_start = 0, 0.0

    while np.linalg.norm(x - target) > cfg.epsilon:
        if len(points) >= cfg.max_steps:
            status, message = RunStatus.MAX_STEPS, f"max_steps = {cfg.max_steps} reached"
            break
        if not ocp.in_state_box(x, TOL_GUARD):
            status, message = RunStatus.LEFT_DOMAIN, f"state {x.tolist()} is outside the state box"
            break
        try:
            picked = _choose_cell(ocp, model, x)
        except StaticMinError as exc:
            status, message = RunStatus.NUMERICAL_FAILURE, str(exc)
            break
        if picked is None:
            status, message = RunStatus.LEFT_DOMAIN, f"no cell contains x = {x.tolist()}"
            break
        cell, u, val = picked
        points.append(PartitionPoint(t, x.copy(), cell.index, u.copy(), val))
        try:
            hold = integrate_hold(
                ocp, cell.index, x, u, t, cfg.diameter, cfg.integrator, cfg.event_tol, cfg.sample_spacing
            )
        except IntegrationError as exc:
            status, message = RunStatus.NUMERICAL_FAILURE, str(exc)
            break
        L = _running_costs(cell, hold.x, u)
        running += _trapezoid(hold.t, L)
        j = len(points) - 1
        k = hold.t.size
        rows_t.append(hold.t)
        rows_x.append(hold.x)
        rows_u.append(np.broadcast_to(u, (k, ocp.m)))
        rows_c.append(np.full(k, cell.index))
        rows_L.append(L)
        rows_i.append(np.full(k, j))
        rows_p.append(np.arange(k) == 0)
        t, x = hold.t_end, hold.x_end.copy()
        if hold.exit is Exit.LEFT_DOMAIN:
            status, message = RunStatus.LEFT_DOMAIN, f"state box boundary reached at t = {t:.12g}"
            break
        if hold.exit is Exit.BOUNDARY_HIT:
            reentries += 1
            if reentries > MAX_REENTRIES and t - nominal_start < cfg.diameter:
                status = RunStatus.CHATTERING
                message = f"{reentries} boundary re-classifications within one interval near x = {x.tolist()}"
                break
        else:
            reentries, nominal_start = 0, t
    else:
        status = RunStatus.REACHED_TARGET

    if rows_t:
        samples = Trajectory(
            np.concatenate(rows_t),
            np.vstack(rows_x),
            np.vstack(rows_u),
            np.concatenate(rows_c),
            np.concatenate(rows_L),
            np.concatenate(rows_i),
            np.concatenate(rows_p),
        )
    else:
        samples = Trajectory(
            np.array([t]),
            x[None, :].copy(),
            np.zeros((1, ocp.m)),
            np.array([-1]),
            np.zeros(1),
            np.array([-1]),
            np.array([False]),
        )
    terminal = ocp.terminal_cost.evaluate(x)
    return PolicyRun(
        points=points,
        samples=samples,
        total_time=t,
        cost=running + terminal,
        online_running_cost=running,
        terminal_cost=terminal,
        status=status,
        config=cfg,
        x0=x_start,
        target=target,
        message=message,
    )


def accumulated_cost(run: PolicyRun, ocp: PwaOcp) -> float:
    """Recompute ``J`` from the dense samples: per-interval trapezoid plus terminal cost."""
    s = run.samples
    total = 0.0
    for j in np.unique(s.interval):
        if j < 0:
            continue
        rows = s.interval == j
        cell = ocp.cells[int(s.cell[rows][0])]
        L = _running_costs(cell, s.x[rows], s.u[rows][0])
        total += _trapezoid(s.t[rows], L)
    return total + ocp.terminal_cost.evaluate(s.x[-1])


# -- output -------------------------------------------------------------------


def trajectory_csv(run: PolicyRun, ocp: PwaOcp) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = ocp.names
    w.writerow(["t", *names[: ocp.n], *names[ocp.n :], "cell", "running_cost", "partition"])
    s = run.samples
    for k in range(len(s)):
        w.writerow(
            [repr(float(s.t[k]))]
            + [repr(float(v)) for v in s.x[k]]
            + [repr(float(v)) for v in s.u[k]]
            + [int(s.cell[k]), repr(float(s.running_cost[k])), int(bool(s.partition[k]))]
        )
    return buf.getvalue()


def run_summary(run: PolicyRun) -> dict:
    return {
        "status": run.status.value,
        "T_pi": run.total_time,
        "J": run.cost,
        "steps": run.steps,
        "final_state": run.final_state.tolist(),
        "message": run.message,
        "config": run.config.to_dict(),
    }


def summary_json(run: PolicyRun) -> str:
    return json.dumps(run_summary(run), indent=2, sort_keys=True)


def feedback_table(run: PolicyRun) -> list[tuple[float, ...]]:
    """``(t_j, x_j..., u_j..., cell)`` for every partition point."""
    return [(p.t, *p.x.tolist(), *p.u.tolist(), p.cell) for p in run.points]

