from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwamc.moments import (
    MomentBasis,
    MomentVector,
    analytic_moments,
    build_localizing_template,
    build_moment_template,
    instantiate,
    moment_position,
    riesz,
)
from pwamc.polynomial import Polynomial, monomials_up_to
from pwamc.problem import InitialMeasure

xs = Polynomial.variable(0, 1)


def lebesgue01(order):
    basis = MomentBasis(1, order)
    return MomentVector(basis, [1.0 / (k + 1) for k in range(len(basis))])


def test_basis_layout():
    b = MomentBasis(2, 2)
    assert len(b) == 15 and b.degree == 4
    assert all(b.index[m] == k for k, m in enumerate(b.monomials))
    # positions do not depend on the truncation degree
    assert all(moment_position(m) == k for k, m in enumerate(monomials_up_to(2, 6)))


def test_moment_template_examples():
    t = build_moment_template(1, 1)
    assert t.side == 2
    assert t.entries == ((((0, 1.0),), ((1, 1.0),)), (((1, 1.0),), ((2, 1.0),)))
    assert build_moment_template(2, 1).side == 3
    t2 = build_moment_template(1, 2)
    assert t2.side == 3 and t2.entries[2][2] == ((4, 1.0),)


def test_localizing_template_examples():
    assert build_localizing_template(Polynomial.constant(1.0, 1), 1, 2) == build_moment_template(1, 2)
    t = build_localizing_template(xs, 1, 1)
    assert t.side == 1 and t.entries == ((((1, 1.0),),),)
    t = build_localizing_template(4 - xs**2, 1, 2)
    assert t.side == 2 and t.half_order == 1
    assert dict(t.entries[0][0]) == {0: 4.0, 2: -1.0}
    with pytest.raises(ValueError):
        build_localizing_template(xs**3, 1, 1)


@pytest.mark.parametrize("nvars,d", [(1, 3), (2, 2), (3, 1)])
def test_templates_symmetric(nvars, d):
    t = build_moment_template(nvars, d)
    assert all(t.entries[i][j] == t.entries[j][i] for i in range(t.side) for j in range(t.side))
    guard = 1 - Polynomial.variable(0, nvars) ** 2
    t = build_localizing_template(guard, nvars, d)
    assert all(t.entries[i][j] == t.entries[j][i] for i in range(t.side) for j in range(t.side))


def test_instantiate_examples():
    b = MomentBasis(1, 2)
    ones = MomentVector(b, np.ones(len(b)))
    M = instantiate(build_moment_template(1, 2), ones)
    assert np.array_equal(M, np.ones((3, 3)))
    assert np.linalg.matrix_rank(M) == 1
    M = instantiate(build_moment_template(1, 1), lebesgue01(1))
    assert np.allclose(M, [[1.0, 0.5], [0.5, 1.0 / 3.0]], rtol=0, atol=1e-15)
    assert not instantiate(build_moment_template(1, 2), MomentVector(b, np.zeros(len(b)))).any()


def test_riesz_examples():
    b = MomentBasis(1, 2)
    dirac = MomentVector(b, [(-1.0) ** k for k in range(len(b))])
    assert riesz(dirac, xs**2) == 1.0
    assert riesz(dirac, Polynomial.constant(1.0, 1)) == dirac.mass
    assert riesz(lebesgue01(1), 2 * (xs - 1) ** 2) == pytest.approx(2.0 / 3.0, abs=1e-15)
    with pytest.raises(ValueError):
        riesz(lebesgue01(1), xs**3)


def test_analytic_moments_dirac_exact():
    y = analytic_moments(InitialMeasure.dirac([-1.0]), MomentBasis(1, 2))
    assert y.values.tolist() == [1.0, -1.0, 1.0, -1.0, 1.0]
    y = analytic_moments(InitialMeasure.dirac([0.0]), MomentBasis(1, 3))
    assert y.values.tolist() == [1.0] + [0.0] * 6
    y = analytic_moments(InitialMeasure.dirac([0.5, -2.0]), MomentBasis(2, 2))
    for mono, val in zip(y.basis.monomials, y.values):
        assert val == 0.5 ** mono[0] * (-2.0) ** mono[1]


def test_analytic_moments_uniform():
    y = analytic_moments(InitialMeasure.uniform([0.0], [1.0]), MomentBasis(1, 1))
    assert np.allclose(y.values, [1.0, 0.5, 1.0 / 3.0], rtol=0, atol=1e-12)
    lo, hi = Fraction(-1, 2), Fraction(3, 2)
    y = analytic_moments(InitialMeasure.uniform([float(lo)], [float(hi)]), MomentBasis(1, 4))
    exact = [(hi ** (k + 1) - lo ** (k + 1)) / ((k + 1) * (hi - lo)) for k in range(9)]
    assert np.allclose(y.values, [float(e) for e in exact], rtol=0, atol=1e-12)


def test_dirac_moment_matrix_rank_one():
    y = analytic_moments(InitialMeasure.dirac([0.7, -0.3]), MomentBasis(2, 3))
    ev = np.linalg.eigvalsh(instantiate(build_moment_template(2, 3), y))
    assert ev[0] >= -1e-12 and ev[-2] <= 1e-10 * ev[-1]


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(0, 2**32 - 1),
)
def test_quadratic_form_identity(nvars, d, seed):
    rng = np.random.default_rng(seed)
    basis = MomentBasis(nvars, d)
    y = MomentVector(basis, rng.uniform(-1, 1, len(basis)))
    half = monomials_up_to(nvars, d)
    q = rng.uniform(-1, 1, len(half))
    qpoly = Polynomial(nvars, dict(zip(half, q)))
    M = instantiate(build_moment_template(nvars, d), y)
    assert abs(q @ M @ q - riesz(y, qpoly * qpoly)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_riesz_linear(seed):
    rng = np.random.default_rng(seed)
    basis = MomentBasis(2, 2)
    monos = basis.monomials
    y1 = MomentVector(basis, rng.integers(-5, 5, len(basis)).astype(float))
    y2 = MomentVector(basis, rng.integers(-5, 5, len(basis)).astype(float))
    p = Polynomial(2, dict(zip(monos, rng.integers(-3, 3, len(monos)).astype(float))))
    q = Polynomial(2, dict(zip(monos, rng.integers(-3, 3, len(monos)).astype(float))))
    a, b = 2.0, -3.0
    assert riesz(y1, a * p + b * q) == a * riesz(y1, p) + b * riesz(y1, q)
    ysum = MomentVector(basis, a * y1.values + b * y2.values)
    assert riesz(ysum, p) == a * riesz(y1, p) + b * riesz(y2, p)
