import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwamc.bench import AnalyticValue, analytic_feedback, oracle_cost
from pwamc.polynomial import Polynomial
from pwamc.problem import Cell, InitialMeasure, PwaOcp, builtin_example
from pwamc.policy import (
    Exit,
    IntegrationError,
    IntegratorConfig,
    PolicyConfig,
    RunStatus,
    StaticMinError,
    accumulated_cost,
    hamiltonian_in_u,
    integrate_hold,
    run_policy,
    run_summary,
    static_min,
    summary_json,
    trajectory_csv,
)

from conftest import ORACLE_COST_M1

xs = Polynomial.variable(0, 1)
x2 = Polynomial.variable(0, 2)
u2 = Polynomial.variable(1, 2)
BOX = np.array([[-4.0, 4.0]])


def plain_cell(lagrangian, A=0.0, a=0.0, B=1.0):
    return Cell(0, np.array([[A]]), np.array([a]), np.array([[B]]), lagrangian, ())


@pytest.fixture(scope="module")
def run_d6(v6, example):
    return run_policy(example, v6, cfg=PolicyConfig(diameter=0.01, epsilon=0.01))


@pytest.fixture(scope="module")
def run_exact(example):
    return run_policy(example, AnalyticValue(), cfg=PolicyConfig(diameter=0.01, epsilon=0.01))


# -- static minimization


@pytest.mark.parametrize("c", [-3.0, -0.4, 0.0, 1.0, 2.5])
def test_static_min_convex_quadratic(c):
    # grad v(0) = c
    u, val = static_min(c * xs + xs**2, plain_cell(u2**2), [0.0], BOX)
    assert u[0] == pytest.approx(-c / 2, abs=1e-14)
    assert val == pytest.approx(-c * c / 4, abs=1e-14)


def test_static_min_at_target_exact_value(example):
    v = (math.sqrt(3) - 1) * (xs - 1) ** 2
    u, val = static_min(v, example.cells[0], [1.0], example.input_box)
    assert u[0] == 0.0 and val == 0.0


def test_static_min_monotone_takes_left_endpoint():
    u, val = static_min(xs, plain_cell(u2), [0.0], BOX)
    assert u[0] == -4.0 and val == -8.0


def test_static_min_ties_prefer_small_norm():
    # q(u) is constant: every u is a minimizer, the smallest-norm one is chosen
    u, _ = static_min(xs, plain_cell(Polynomial.zero(2), B=0.0), [0.0], BOX)
    assert u[0] == 0.0
    u, _ = static_min(xs, plain_cell(Polynomial.zero(2), B=0.0), [0.0], np.array([[1.0, 2.0]]))
    assert u[0] == 1.0
    # symmetric double well: minima at +-1, tie broken lexicographically
    u, _ = static_min(xs, plain_cell((u2**2 - 1) ** 2, B=0.0), [0.0], BOX)
    assert u[0] == pytest.approx(-1.0, abs=1e-12)


def test_static_min_nonconvex_global():
    # q(u) = u^4 - 3u^2 + u has its global minimum on the negative branch
    lag = u2**4 - 3 * u2**2
    u, val = static_min(xs, plain_cell(lag), [0.0], BOX)
    grid = np.linspace(-4, 4, 800001)
    q = grid**4 - 3 * grid**2 + grid
    assert val <= q.min() + 1e-12
    assert abs(u[0] - grid[np.argmin(q)]) <= 1e-5


def test_static_min_two_inputs():
    x = Polynomial.variable(0, 3)
    a = Polynomial.variable(1, 3)
    b = Polynomial.variable(2, 3)
    lag = (a - 0.5) ** 2 * (a + 1) ** 2 + (b**2 - 1) ** 2 + 0.3 * b + 0.1 * x * a
    cell = Cell(0, np.zeros((1, 1)), np.zeros(1), np.array([[0.5, -0.2]]), lag, ())
    box = np.array([[-2.0, 2.0], [-2.0, 2.0]])
    u, val = static_min(xs, cell, [0.4], box)
    q = hamiltonian_in_u(cell, np.array([1.0]), np.array([0.4]), 2)
    g = np.linspace(-2, 2, 401)
    A, Bm = np.meshgrid(g, g, indexing="ij")
    vals = np.array([q.evaluate([p, r]) for p, r in zip(A.ravel(), Bm.ravel())])
    assert val <= vals.min() + 1e-9
    assert val == pytest.approx(q.evaluate(u), abs=1e-12)


def test_static_min_overflow():
    with pytest.raises(StaticMinError):
        static_min(1e308 * xs**2, plain_cell(u2**2), [10.0], BOX)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.4, 2, allow_nan=False))
def test_static_min_reproduces_analytic_feedback(x0):
    # below x = -1.4 the analytic feedback exceeds the input box and saturates
    ocp = builtin_example()
    cell = ocp.cells[0] if x0 >= 0 else ocp.cells[1]
    u, _ = static_min(AnalyticValue(), cell, [x0], ocp.input_box)
    assert abs(u[0] - analytic_feedback(x0)) <= 1e-9


# -- integration


def test_integrator_matches_closed_form(example):
    hold = integrate_hold(example, 0, [2.0], [0.0], 0.0, 2.0, sample_spacing=1e-2)
    assert hold.exit is Exit.BUDGET_EXHAUSTED and hold.t_end == 2.0
    err = np.abs(hold.x[:, 0] - (1.0 + np.exp(-hold.t)))
    assert err.max() <= 1e-8
    half = integrate_hold(example, 0, [2.0], [0.0], 0.0, 0.5)
    assert half.t_end == 0.5 and abs(half.x_end[0] - (1.0 + math.exp(-0.5))) <= 1e-8


def test_integrator_locates_boundary(example):
    # cell x <= 0 with u = 0.5: xdot = x + 1.5 > 0 from -0.5
    hold = integrate_hold(example, 1, [-0.5], [0.5], 0.0, 5.0)
    assert hold.exit is Exit.BOUNDARY_HIT
    assert abs(hold.x_end[0]) <= 1e-9
    assert hold.t_end == pytest.approx(math.log(1.5), abs=1e-9)


def test_integrator_budget(example):
    hold = integrate_hold(example, 0, [0.5], [0.0], 3.0, 0.01)
    assert hold.exit is Exit.BUDGET_EXHAUSTED and hold.t_end == pytest.approx(3.01, abs=1e-15)
    assert hold.t[-1] <= 3.01


def test_integrator_left_domain(example):
    hold = integrate_hold(example, 0, [1.9], [4.0], 0.0, 5.0)
    assert hold.exit is Exit.LEFT_DOMAIN and hold.x_end[0] == pytest.approx(2.0, abs=1e-9)


def test_integrator_step_underflow(example):
    with pytest.raises(IntegrationError, match="min_step"):
        integrate_hold(example, 0, [0.5], [0.0], 0.0, 2.0, IntegratorConfig(min_step=0.5))


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(diameter=0.0)
    with pytest.raises(ValueError):
        PolicyConfig(epsilon=-1.0)
    with pytest.raises(ValueError):
        PolicyConfig(diameter=0.01, event_tol=1e-7)
    assert PolicyConfig(diameter=0.01).event_tol <= 1e-8


# -- the loop


def test_run_d6_reaches_target(run_d6):
    assert run_d6.status is RunStatus.REACHED_TARGET
    assert abs(run_d6.final_state[0] - 1.0) <= 0.01
    x = run_d6.samples.x[:, 0]
    assert np.count_nonzero(np.diff(np.sign(x[np.abs(x) > 1e-12])) != 0) == 1
    assert abs(run_d6.cost - ORACLE_COST_M1) <= 0.1 * ORACLE_COST_M1


def test_run_from_target_is_empty(example):
    run = run_policy(example, xs**2, cfg=PolicyConfig(), x0=[1.0])
    assert run.status is RunStatus.REACHED_TARGET and run.steps == 0
    assert run.cost == example.terminal_cost.evaluate([1.0]) == 0.0
    assert accumulated_cost(run, example) == 0.0


def test_constant_state_at_target_costs_nothing(example):
    run = run_policy(example, (xs - 1) ** 2, x_T=[1.5], cfg=PolicyConfig(max_steps=50), x0=[1.0])
    assert run.status is RunStatus.MAX_STEPS
    assert np.all(run.samples.x[:, 0] == 1.0)
    assert run.cost == 0.0 and accumulated_cost(run, example) == 0.0
    assert run.total_time == pytest.approx(0.5, abs=1e-12)


def test_left_domain(example):
    run = run_policy(example, -10 * xs, cfg=PolicyConfig(), x0=[1.5])
    assert run.status is RunStatus.LEFT_DOMAIN


def test_chattering_is_capped():
    x = Polynomial.variable(0, 2)
    lag = u2**2
    cells = (
        Cell(0, np.zeros((1, 1)), np.array([-1.0]), np.zeros((1, 1)), lag, (x,)),
        Cell(1, np.zeros((1, 1)), np.array([1.0]), np.zeros((1, 1)), lag, (-x,)),
    )
    ocp = PwaOcp(1, 1, cells, Polynomial.zero(1), (xs - 1, 1 - xs), InitialMeasure.dirac([-0.5]),
                 np.array([[-2.0, 2.0]]), np.array([[-1.0, 1.0]]))
    run = run_policy(ocp, xs, cfg=PolicyConfig(max_steps=10_000))
    assert run.status is RunStatus.CHATTERING
    assert run.steps <= 200


def test_accumulated_cost_matches_online(run_d6, run_exact, example):
    for run in (run_d6, run_exact):
        assert abs(accumulated_cost(run, example) - run.cost) <= 1e-9


def test_piecewise_constant_and_clock(run_d6):
    s, cfg = run_d6.samples, run_d6.config
    times = [p.t for p in run_d6.points]
    assert all(b > a for a, b in zip(times, times[1:]))
    for j, p in enumerate(run_d6.points):
        rows = s.interval == j
        assert np.all(s.u[rows] == p.u)
        assert s.t[rows][0] == p.t and s.partition[rows][0] and not s.partition[rows][1:].any()
        assert s.t[rows][-1] - p.t <= cfg.diameter + cfg.event_tol
        assert np.all(np.diff(s.t[rows]) >= 0)


def test_cell_consistency(run_d6, example):
    s, tol = run_d6.samples, run_d6.config.event_tol
    for k in range(len(s)):
        cell = example.cells[int(s.cell[k])]
        assert np.all(cell.guard_values(s.x[k], s.u[k]) >= -10 * tol)


def test_partition_points_are_certified_minima(run_d6, v6, example):
    rng = np.random.default_rng(0)
    grad = v6.partial_derivative(0)
    for p in run_d6.points:
        cell = example.cells[p.cell]
        assert example.input_box[0, 0] <= p.u[0] <= example.input_box[0, 1]
        q = hamiltonian_in_u(cell, np.array([grad.evaluate(p.x)]), p.x, 1)
        for ur in rng.uniform(-4, 4, 100):
            assert p.hamiltonian_value <= q.evaluate([ur]) + 1e-9


def test_exact_value_reproduces_feedback(run_exact):
    assert run_exact.status is RunStatus.REACHED_TARGET
    dev = max(abs(p.u[0] - analytic_feedback(p.x[0])) for p in run_exact.points)
    assert dev <= 1e-6


def test_refinement_does_not_hurt(v6, example):
    oracle = oracle_cost(-1.0)
    gaps = []
    for d in (0.01, 0.005):
        run = run_policy(example, v6, cfg=PolicyConfig(diameter=d, epsilon=0.01))
        gaps.append(abs(run.cost - oracle))
    assert gaps[1] <= gaps[0] + 1e-3


def test_lower_bound_below_policy_costs(hierarchy_results, run_d6, run_exact):
    for r in hierarchy_results:
        assert r.lower_bound <= run_d6.cost + 1e-4
        assert r.lower_bound <= run_exact.cost + 1e-4


def test_outputs(run_d6, example):
    text = trajectory_csv(run_d6, example)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "x1", "u1", "cell", "running_cost", "partition"]
    assert len(rows) == len(run_d6.samples) + 1
    assert sum(int(r[-1]) for r in rows[1:]) == run_d6.steps
    doc = json.loads(summary_json(run_d6))
    assert doc["status"] == "ReachedTarget" and doc["steps"] == run_d6.steps
    assert doc["J"] == run_d6.cost and doc["T_pi"] == run_d6.total_time
    assert doc["config"]["diameter"] == 0.01
    assert run_summary(run_d6)["J"] == run_d6.cost
