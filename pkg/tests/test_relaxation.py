import numpy as np
import pytest

from pwamc.polynomial import Polynomial
from pwamc.problem import builtin_example
from pwamc.relaxation import (
    RelaxationError,
    assemble,
    hierarchy,
    minimum_order,
    sampled_hjb,
    scale_problem,
    solve_order,
    unit_box_map,
)
from pwamc.sdp import Status

from conftest import ORACLE_COST_M1

x = Polynomial.variable(0, 2)
u = Polynomial.variable(1, 2)


def test_minimum_order(example):
    assert minimum_order(example) == 1
    quartic = builtin_example()
    cells = tuple(
        type(c)(c.index, c.A, c.a, c.B, c.lagrangian + x**4, c.guards) for c in quartic.cells
    )
    import dataclasses

    assert minimum_order(dataclasses.replace(quartic, cells=cells)) == 2
    linear_cells = tuple(type(c)(c.index, c.A, c.a, c.B, x + 3, c.guards) for c in quartic.cells)
    assert minimum_order(dataclasses.replace(quartic, cells=linear_cells)) == 1


@pytest.mark.parametrize("d,rows", [(1, 3), (6, 13)])
def test_row_count(example, d, rows):
    relax = assemble(example, d)
    assert relax.program.F.shape[0] == rows
    assert relax.row_monomial == [(k,) for k in range(rows)]


def test_constant_row_fixes_terminal_mass(example):
    relax = assemble(example, 1)
    F, g = relax.program.F, relax.program.g
    terminal_mass = relax.offsets[-1]
    assert g[0] == 1.0
    assert F[0, terminal_mass] == 1.0 and np.count_nonzero(F[0]) == 1


def test_layout_covers_every_moment(example):
    for d in (1, 3):
        relax = assemble(example, d)
        used = set()
        for blk in relax.program.blocks:
            used |= set(blk.coefs)
        used |= set(np.nonzero(relax.program.c)[0].tolist())
        used |= set(np.nonzero(np.abs(relax.program.F).sum(axis=0))[0].tolist())
        assert used <= set(relax.var_layout.values())
        assert len(set(relax.var_layout.values())) == len(relax.var_layout)


def test_blocks_per_measure(example):
    relax = assemble(example, 2)
    # per cell: moment matrix + 1 cell guard + 4 box guards; terminal: moment + 2 + 2
    names = [info.measure for info in relax.block_info]
    assert names.count(0) == 6 and names.count(1) == 6 and names.count(-1) == 5


def test_order_below_minimum(example):
    with pytest.raises(RelaxationError):
        hierarchy(example, 0)


def test_bounds_nonnegative_and_monotone(hierarchy_results):
    assert [r.order for r in hierarchy_results] == [1, 2, 3, 4, 5, 6]
    assert all(r.status is Status.OPTIMAL for r in hierarchy_results)
    bounds = [r.lower_bound for r in hierarchy_results]
    assert all(b >= -1e-8 for b in bounds)
    assert all(b2 >= b1 - 1e-7 for b1, b2 in zip(bounds, bounds[1:]))
    assert all(b <= ORACLE_COST_M1 + 1e-4 for b in bounds)


def test_terminal_mass_one(hierarchy_results):
    for r in hierarchy_results:
        y_T0 = r.solution.y[r.relaxation.offsets[-1]]
        assert y_T0 == pytest.approx(1.0, abs=1e-7)


def test_value_at_target_nonpositive(hierarchy_results):
    for r in hierarchy_results:
        assert r.value.v.evaluate([1.0]) <= 10 * 1e-8
        assert r.value.v.degree <= 2 * r.order


def test_certificate_at_order_six(hierarchy_results):
    cert = hierarchy_results[-1].certificate
    assert cert.putinar_ok()
    for res, scale in zip(cert.cell_residuals + [cert.terminal_residual], cert.cell_scales + [cert.terminal_scale]):
        assert res <= 1e-6 * (1 + scale)
    assert cert.worst_hjb >= -1e-4
    assert cert.hjb_min[0] >= -1e-4
    assert cert.terminal_min >= -1e-6


def test_zero_candidate_is_a_subsolution(example):
    mins, _ = sampled_hjb(example, Polynomial.zero(1), points=51)
    assert min(mins) >= 0.0


def test_scaled_problem_is_unit_box(example):
    scaled = scale_problem(example, unit_box_map(example))
    assert scaled.state_box.tolist() == [[-1.0, 1.0]] and scaled.input_box.tolist() == [[-1.0, 1.0]]
    assert scaled.initial_measure.point.tolist() == [-0.5]


def test_scaling_invariance(example):
    a = solve_order(example, 3, scaling=True)
    b = solve_order(example, 3, scaling=False)
    assert a.status is b.status is Status.OPTIMAL
    assert abs(a.lower_bound - b.lower_bound) <= 1e-5 * abs(a.lower_bound)
    grid = np.linspace(-2, 2, 41)
    va = np.array([a.value.v.evaluate([g]) for g in grid])
    vb = np.array([b.value.v.evaluate([g]) for g in grid])
    assert np.max(np.abs(va - vb)) <= 1e-5 * np.max(np.abs(va))


def test_uniform_initial_measure_solves():
    import dataclasses

    from pwamc.problem import InitialMeasure

    ocp = dataclasses.replace(builtin_example(), initial_measure=InitialMeasure.uniform([-1.0], [-0.5]))
    res = solve_order(ocp, 2)
    assert res.status is Status.OPTIMAL
    assert 0.0 <= res.lower_bound <= ORACLE_COST_M1


def test_mass_bound_keeps_masses_finite(hierarchy_results):
    for r in hierarchy_results:
        off = r.relaxation.offsets
        assert r.solution.y[off[0]] + r.solution.y[off[1]] <= 20.0 + 1e-6


def test_without_mass_bound_masses_blow_up():
    # parking at the target costs nothing, so occupation mass is unbounded
    res = solve_order(builtin_example(mass_bound=None), 2)
    assert res.relaxation.mass_block is None
    off = res.relaxation.offsets
    assert res.solution.y[off[0]] + res.solution.y[off[1]] > 100.0
    if res.status is not Status.OPTIMAL:
        assert res.value is None
