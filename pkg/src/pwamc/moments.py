"""Truncated moment sequences, the Riesz functional, moment/localizing templates.

Moment positions index the grlex monomial list. Because a lower-degree grlex
list is a prefix of every higher-degree one, a position does not depend on the
truncation degree, so templates can be shared across relaxation orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from pwamc.polynomial import Monomial, Polynomial, monomials_up_to
from pwamc.problem import InitialMeasure


@lru_cache(maxsize=None)
def _position_table(nvars: int, degree: int) -> dict[Monomial, int]:
    return {m: k for k, m in enumerate(monomials_up_to(nvars, degree))}


def moment_position(mono: Monomial) -> int:
    """Position of ``mono`` in the grlex list of its variable count."""
    return _position_table(len(mono), sum(mono))[tuple(mono)]


@dataclass(frozen=True)
class MomentBasis:
    nvars: int
    order: int

    @property
    def degree(self) -> int:
        return 2 * self.order

    @property
    def monomials(self) -> list[Monomial]:
        return monomials_up_to(self.nvars, self.degree)

    @property
    def index(self) -> dict[Monomial, int]:
        return _position_table(self.nvars, self.degree)

    def __len__(self) -> int:
        return math.comb(self.nvars + self.degree, self.nvars)


@dataclass(frozen=True)
class MomentVector:
    basis: MomentBasis
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.size != len(self.basis):
            raise ValueError(f"expected {len(self.basis)} moments, got {vals.size}")
        object.__setattr__(self, "values", vals)

    @property
    def mass(self) -> float:
        return float(self.values[0])

    def __getitem__(self, mono: Monomial) -> float:
        return float(self.values[self.basis.index[tuple(mono)]])


@dataclass(frozen=True)
class MatrixTemplate:
    """Linear map from moments to a symmetric matrix.

    ``entries[i][j]`` lists ``(moment position, coefficient)`` pairs.
    """

    nvars: int
    half_order: int
    entries: tuple[tuple[tuple[tuple[int, float], ...], ...], ...]

    @property
    def side(self) -> int:
        return len(self.entries)

    @property
    def max_position(self) -> int:
        return max((pos for row in self.entries for cell in row for pos, _ in cell), default=-1)

    def coefficient_matrices(self) -> dict[int, np.ndarray]:
        """``{position: A}`` such that the instantiated matrix is ``sum_pos y[pos] * A``."""
        out: dict[int, np.ndarray] = {}
        for i, row in enumerate(self.entries):
            for j, cell in enumerate(row):
                for pos, coef in cell:
                    if pos not in out:
                        out[pos] = np.zeros((self.side, self.side))
                    out[pos][i, j] += coef
        return dict(sorted(out.items()))


@lru_cache(maxsize=None)
def build_moment_template(nvars: int, d: int) -> MatrixTemplate:
    if d < 0:
        raise ValueError("order must be nonnegative")
    return build_localizing_template(Polynomial.constant(1.0, nvars), nvars, d)


@lru_cache(maxsize=None)
def build_localizing_template(p: Polynomial, nvars: int, d: int) -> MatrixTemplate:
    """Template of M_{d'}(p y) with half-order ``d' = d - ceil(deg p / 2)``."""
    if p.nvars != nvars:
        raise ValueError(f"polynomial has {p.nvars} variables, expected {nvars}")
    if p.is_zero():
        raise ValueError("localizing polynomial must be nonzero")
    if p.degree > 2 * d:
        raise ValueError(f"guard of degree {p.degree} is too high for relaxation order {d}")
    half = d - math.ceil(p.degree / 2)
    basis = monomials_up_to(nvars, half)
    table = _position_table(nvars, 2 * d)
    terms = list(p.items())
    rows = []
    for mi in basis:
        row = []
        for mj in basis:
            acc: dict[int, float] = {}
            for gamma, coef in terms:
                mono = tuple(a + b + c for a, b, c in zip(mi, mj, gamma))
                pos = table[mono]
                acc[pos] = acc.get(pos, 0.0) + coef
            row.append(tuple(sorted((pos, c) for pos, c in acc.items() if c != 0.0)))
        rows.append(tuple(row))
    return MatrixTemplate(nvars, half, tuple(rows))


def instantiate(t: MatrixTemplate, y: MomentVector) -> np.ndarray:
    if t.nvars != y.basis.nvars or t.max_position >= len(y.basis):
        raise ValueError("template does not fit the moment basis")
    vals = y.values
    out = np.empty((t.side, t.side))
    for i, row in enumerate(t.entries):
        for j, cell in enumerate(row):
            out[i, j] = math.fsum(c * vals[pos] for pos, c in cell)
    return out


def riesz(y: MomentVector, p: Polynomial) -> float:
    """The linear functional ``sum_alpha p_alpha y_alpha``."""
    if p.nvars != y.basis.nvars:
        raise ValueError("variable-count mismatch between polynomial and moments")
    if p.degree > y.basis.degree:
        raise ValueError(f"degree {p.degree} exceeds moment degree {y.basis.degree}")
    index = y.basis.index
    return math.fsum(coef * y.values[index[mono]] for mono, coef in p.items())


def analytic_moments(meas: InitialMeasure, basis: MomentBasis) -> MomentVector:
    """Moments of a Dirac or a normalized uniform box measure."""
    if meas.dim != basis.nvars:
        raise ValueError("measure dimension does not match the basis")
    vals = np.empty(len(basis))
    for k, mono in enumerate(basis.monomials):
        if meas.kind == "dirac":
            vals[k] = math.prod(float(x) ** e for x, e in zip(meas.point, mono))
        else:
            vals[k] = math.prod(
                (hi ** (e + 1) - lo ** (e + 1)) / ((e + 1) * (hi - lo))
                for lo, hi, e in zip(map(float, meas.lo), map(float, meas.hi), mono)
            )
    return MomentVector(basis, vals)
