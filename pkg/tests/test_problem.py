import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwamc.polynomial import Polynomial, monomials_up_to
from pwamc.problem import (
    CellLookupError,
    ProblemError,
    boundary_consistency,
    classify_cell,
    lie_map,
    parse_problem,
    render_problem,
)

xs = Polynomial.variable(0, 1)
x = Polynomial.variable(0, 2)
u = Polynomial.variable(1, 2)


def test_builtin_example_structure(example):
    assert (example.n, example.m, len(example.cells)) == (1, 1, 2)
    c0, c1 = example.cells
    assert c0.A.tolist() == [[-1.0]] and c0.a.tolist() == [1.0] and c0.B.tolist() == [[1.0]]
    assert c1.A.tolist() == [[1.0]] and c1.a.tolist() == [1.0] and c1.B.tolist() == [[1.0]]
    assert c0.guards == (x,) and c1.guards == (-x,)
    assert example.initial_measure.kind == "dirac"
    assert example.initial_measure.point.tolist() == [-1.0]
    assert example.cells[0].lagrangian.evaluate([1.0, 0.0]) == 0.0
    assert example.terminal_cost.is_zero()
    assert example.terminal_point().tolist() == [1.0]
    assert example.state_box.tolist() == [[-2.0, 2.0]]
    assert example.input_box.tolist() == [[-4.0, 4.0]]
    assert example.mass_bound == 20.0


def test_roundtrip(example):
    text = render_problem(example)
    again = parse_problem(text)
    assert render_problem(again) == text
    for c1, c2 in zip(example.cells, again.cells):
        assert c1.lagrangian == c2.lagrangian and c1.guards == c2.guards
        assert np.array_equal(c1.A, c2.A)


def _doc(example):
    return json.loads(render_problem(example))


def test_parse_errors(example):
    d = _doc(example)
    d["cells"][0]["A"] = [[1.0, 2.0]]
    with pytest.raises(ProblemError, match=r"cells\[0\]\.A"):
        parse_problem(json.dumps(d))
    d = _doc(example)
    d["cells"] = []
    with pytest.raises(ProblemError, match="cell"):
        parse_problem(json.dumps(d))
    d = _doc(example)
    d["extra"] = 1
    with pytest.raises(ProblemError, match="extra"):
        parse_problem(json.dumps(d))
    d = _doc(example)
    d["state_box"] = [[-2.0, None]]
    with pytest.raises(ProblemError):
        parse_problem(json.dumps(d))
    d = _doc(example)
    d["cells"][1]["lagrangian"] = "2*(x1 - 1)^2 + u1^"
    with pytest.raises(ProblemError, match=r"cells\[1\]\.lagrangian"):
        parse_problem(json.dumps(d))
    d = _doc(example)
    d["mass_bound"] = -1
    with pytest.raises(ProblemError):
        parse_problem(json.dumps(d))


def test_lie_map_examples(example):
    c0, c1 = example.cells
    assert lie_map(c0, xs**2) == 2 * x**2 - 2 * x - 2 * x * u
    assert lie_map(c0, Polynomial.constant(1.0, 1)).is_zero()
    assert lie_map(c1, xs) == -x - 1 - u
    with pytest.raises(ValueError):
        lie_map(c0, u)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-2, 2, allow_nan=False), min_size=5, max_size=5),
    st.lists(st.floats(-2, 2, allow_nan=False), min_size=5, max_size=5),
    st.floats(-3, 3, allow_nan=False),
    st.floats(-3, 3, allow_nan=False),
)
def test_lie_map_linear(cv, cw, alpha, beta):
    from pwamc.problem import builtin_example

    cell = builtin_example().cells[0]
    basis = monomials_up_to(1, 4)
    v = Polynomial(1, dict(zip(basis, cv)))
    w = Polynomial(1, dict(zip(basis, cw)))
    lhs = lie_map(cell, alpha * v + beta * w)
    rhs = alpha * lie_map(cell, v) + beta * lie_map(cell, w)
    assert lhs.allclose(rhs, atol=1e-12)


def test_classify_cell(example):
    assert classify_cell(example, [0.5]) == 0
    assert classify_cell(example, [-0.5]) == 1
    # on the boundary the cell being entered wins: xdot = 1 + u
    assert classify_cell(example, [0.0], [0.0]) == 0
    assert classify_cell(example, [0.0], [-3.0]) == 1
    gap_model = parse_problem(render_problem(example).replace('"-x1"', '"-x1 - 1"'))
    with pytest.raises(CellLookupError):
        classify_cell(gap_model, [-0.5])


def test_field_continuous_on_boundary(example):
    c0, c1 = example.cells
    for uu in np.linspace(-4, 4, 17):
        f0 = c0.vector_field([0.0], [uu])
        f1 = c1.vector_field([0.0], [uu])
        assert f0[0] == f1[0] == 1.0 + uu
    report = boundary_consistency(example)
    assert report["consistent"] and report["boundary_points"] > 100
