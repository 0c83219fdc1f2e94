"""Sparse multivariate polynomials over a fixed, ordered variable list.

Terms are kept in a dict keyed by exponent tuples and are always iterated in
graded-lexicographic order (total degree first, then descending lex), so that
moment indices, SDP rows and serialized output are reproducible.
"""

from __future__ import annotations

import math
import re
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence

import numpy as np

Monomial = tuple[int, ...]


def grlex_key(mono: Monomial) -> tuple:
    return (sum(mono), tuple(-e for e in mono))


@lru_cache(maxsize=None)
def _monomials_of_degree(nvars: int, degree: int) -> tuple[Monomial, ...]:
    out = []
    for combo in combinations_with_replacement(range(nvars), degree):
        exps = [0] * nvars
        for k in combo:
            exps[k] += 1
        out.append(tuple(exps))
    out.sort(key=grlex_key)
    return tuple(out)


def monomials_up_to(nvars: int, degree: int) -> list[Monomial]:
    """All exponent vectors of total degree <= ``degree`` in grlex order."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    out: list[Monomial] = []
    for d in range(degree + 1):
        out.extend(_monomials_of_degree(nvars, d))
    return out


def default_names(nvars: int, n_state: int | None = None) -> list[str]:
    if n_state is None or n_state >= nvars:
        return [f"x{i + 1}" for i in range(nvars)]
    return [f"x{i + 1}" for i in range(n_state)] + [
        f"u{j + 1}" for j in range(nvars - n_state)
    ]


class Polynomial:
    """Immutable sparse polynomial with float coefficients.

    >>> x, u = Polynomial.variable(0, 2), Polynomial.variable(1, 2)
    >>> str(2 * (x - 1) ** 2 + u ** 2)
    '2*x1^2 + x2^2 - 4*x1 + 2'
    """

    __slots__ = ("nvars", "_terms")

    def __init__(self, nvars: int, terms: Mapping[Monomial, float] | None = None):
        if nvars < 0:
            raise ValueError("nvars must be nonnegative")
        clean: dict[Monomial, float] = {}
        for mono, coef in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != nvars:
                raise ValueError(
                    f"exponent vector {mono} has length {len(mono)}, expected {nvars}"
                )
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            coef = float(coef)
            if coef != 0.0:
                clean[mono] = clean.get(mono, 0.0) + coef
        self.nvars = nvars
        self._terms = {
            m: clean[m] for m in sorted(clean, key=grlex_key) if clean[m] != 0.0
        }

    # construction helpers

    @classmethod
    def zero(cls, nvars: int) -> Polynomial:
        return cls(nvars)

    @classmethod
    def constant(cls, value: float, nvars: int) -> Polynomial:
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, index: int, nvars: int) -> Polynomial:
        if not 0 <= index < nvars:
            raise IndexError(f"variable index {index} out of range for {nvars} variables")
        mono = [0] * nvars
        mono[index] = 1
        return cls(nvars, {tuple(mono): 1.0})

    @classmethod
    def monomial(cls, mono: Sequence[int], coef: float = 1.0) -> Polynomial:
        return cls(len(mono), {tuple(mono): coef})

    @classmethod
    def from_coefficients(
        cls, nvars: int, coefs: Iterable[float], basis: Sequence[Monomial] | None = None
    ) -> Polynomial:
        coefs = list(coefs)
        if basis is None:
            deg = 0
            while math.comb(nvars + deg, nvars) < len(coefs):
                deg += 1
            basis = monomials_up_to(nvars, deg)
        if len(coefs) > len(basis):
            raise ValueError("more coefficients than basis monomials")
        return cls(nvars, dict(zip(basis, coefs)))

    # views

    @property
    def terms(self) -> dict[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def coefficient(self, mono: Monomial) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def coefficients(self, basis: Sequence[Monomial]) -> np.ndarray:
        """Dense coefficient vector over ``basis``; raises if a term is missing from it."""
        index = {m: k for k, m in enumerate(basis)}
        out = np.zeros(len(basis))
        for mono, coef in self._terms.items():
            if mono not in index:
                raise ValueError(f"monomial {mono} not in basis")
            out[index[mono]] = coef
        return out

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        if not self._terms:
            return -1
        return max(sum(m) for m in self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def uses_variable(self, index: int) -> bool:
        return any(m[index] > 0 for m in self._terms)

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # arithmetic

    def _check(self, other: Polynomial) -> None:
        if self.nvars != other.nvars:
            raise ValueError(
                f"variable-count mismatch: {self.nvars} vs {other.nvars}"
            )

    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(float(other), self.nvars)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        terms = dict(self._terms)
        for mono, coef in other._terms.items():
            terms[mono] = terms.get(mono, 0.0) + coef
        return Polynomial(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial(self.nvars, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return other + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial(self.nvars, {m: c * float(other) for m, c in self._terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        terms: dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                mono = tuple(a + b for a, b in zip(m1, m2))
                terms[mono] = terms.get(mono, 0.0) + c1 * c2
        return Polynomial(self.nvars, terms)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> Polynomial:
        return self * (1.0 / float(scalar))

    def __pow__(self, k: int) -> Polynomial:
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer powers are supported")
        result = Polynomial.constant(1.0, self.nvars)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self) -> int:
        return hash((self.nvars, tuple(self._terms.items())))

    def allclose(self, other: Polynomial, atol: float = 1e-12) -> bool:
        self._check(other)
        keys = set(self._terms) | set(other._terms)
        return all(abs(self.coefficient(k) - other.coefficient(k)) <= atol for k in keys)

    # calculus / evaluation

    def partial_derivative(self, var: int) -> Polynomial:
        if not 0 <= var < self.nvars:
            raise IndexError(f"variable index {var} out of range for {self.nvars} variables")
        terms = {}
        for mono, coef in self._terms.items():
            e = mono[var]
            if e:
                new = list(mono)
                new[var] = e - 1
                terms[tuple(new)] = coef * e
        return Polynomial(self.nvars, terms)

    def gradient(self, variables: Iterable[int] | None = None) -> list[Polynomial]:
        if variables is None:
            variables = range(self.nvars)
        return [self.partial_derivative(k) for k in variables]

    def evaluate(self, point: Sequence[float]) -> float:
        z = np.asarray(point, dtype=float).reshape(-1)
        if z.size != self.nvars:
            raise ValueError(f"point has length {z.size}, expected {self.nvars}")
        if not np.all(np.isfinite(z)):
            raise ValueError("point must be finite")
        vals = [float(z[k]) for k in range(self.nvars)]
        return math.fsum(
            coef * math.prod(v**e for v, e in zip(vals, mono) if e)
            for mono, coef in self._terms.items()
        )

    __call__ = evaluate

    def substitute_affine(self, matrix, offset) -> Polynomial:
        """Compose with ``z <- matrix @ z' + offset`` and expand."""
        S = np.atleast_2d(np.asarray(matrix, dtype=float))
        c = np.asarray(offset, dtype=float).reshape(-1)
        if S.shape != (self.nvars, self.nvars) or c.size != self.nvars:
            raise ValueError(
                f"affine map must be {self.nvars}x{self.nvars} with offset of length {self.nvars}"
            )
        images = []
        for i in range(self.nvars):
            terms = {(0,) * self.nvars: c[i]}
            for j in range(self.nvars):
                mono = [0] * self.nvars
                mono[j] = 1
                terms[tuple(mono)] = S[i, j]
            images.append(Polynomial(self.nvars, terms))
        powers: dict[tuple[int, int], Polynomial] = {}

        def power(i: int, e: int) -> Polynomial:
            if (i, e) not in powers:
                powers[(i, e)] = (
                    Polynomial.constant(1.0, self.nvars) if e == 0 else power(i, e - 1) * images[i]
                )
            return powers[(i, e)]

        result = Polynomial.zero(self.nvars)
        for mono, coef in self._terms.items():
            term = Polynomial.constant(coef, self.nvars)
            for i, e in enumerate(mono):
                if e:
                    term = term * power(i, e)
            result = result + term
        return result

    def embed(self, nvars: int, positions: Sequence[int]) -> Polynomial:
        """Re-express in a larger variable list; variable k goes to ``positions[k]``."""
        if len(positions) != self.nvars:
            raise ValueError("positions must list one target per variable")
        terms = {}
        for mono, coef in self._terms.items():
            new = [0] * nvars
            for k, e in enumerate(mono):
                new[positions[k]] += e
            terms[tuple(new)] = coef
        return Polynomial(nvars, terms)

    def restrict(self, keep: Sequence[int]) -> Polynomial:
        """Drop variables not in ``keep``; they must not appear in any term."""
        keep = list(keep)
        for mono in self._terms:
            if any(e and k not in keep for k, e in enumerate(mono)):
                raise ValueError("polynomial uses a variable that is being dropped")
        return Polynomial(
            len(keep), {tuple(m[k] for k in keep): c for m, c in self._terms.items()}
        )

    # rendering

    def to_string(self, names: Sequence[str] | None = None) -> str:
        names = list(names) if names is not None else default_names(self.nvars)
        if not self._terms:
            return "0"
        # highest degree first; ties keep the grlex order within a degree
        order = sorted(self._terms, key=lambda m: (-sum(m), grlex_key(m)[1]))
        parts = []
        for k, mono in enumerate(order):
            coef = self._terms[mono]
            factors = [
                names[i] if e == 1 else f"{names[i]}^{e}" for i, e in enumerate(mono) if e
            ]
            mag = abs(coef)
            if factors and mag == 1.0:
                body = "*".join(factors)
            else:
                body = "*".join([_fmt(mag)] + factors)
            if k == 0:
                parts.append(("-" if coef < 0 else "") + body)
            else:
                parts.append((" - " if coef < 0 else " + ") + body)
        return "".join(parts)

    def __str__(self) -> str:
        return self.to_string()

    def __repr__(self) -> str:
        return f"Polynomial({self.nvars}, {self._terms!r})"


def _fmt(value: float) -> str:
    return repr(float(value)) if value != int(value) or abs(value) >= 1e16 else str(int(value))


# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*^()]))"
)


class PolynomialSyntaxError(ValueError):
    pass


def parse_polynomial(text: str, names: Sequence[str]) -> Polynomial:
    """Parse ``+ - * ^`` expressions with parentheses over the given variable names.

    >>> parse_polynomial("2*(x1-1)^2 + u1^2", ["x1", "u1"]).to_string(["x1", "u1"])
    '2*x1^2 + u1^2 - 4*x1 + 2'
    """
    names = list(names)
    nvars = len(names)
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise PolynomialSyntaxError(f"unexpected character {text[pos]!r} at column {pos + 1}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    k = 0

    def peek():
        return tokens[k] if k < len(tokens) else (None, None, len(text))

    def take(expected=None):
        nonlocal k
        tok = peek()
        if tok[0] is None:
            raise PolynomialSyntaxError("unexpected end of expression")
        if expected is not None and tok[1] != expected:
            raise PolynomialSyntaxError(f"expected {expected!r} at column {tok[2] + 1}")
        k += 1
        return tok

    def expr() -> Polynomial:
        result = term()
        while peek()[1] in ("+", "-"):
            op = take()[1]
            rhs = term()
            result = result + rhs if op == "+" else result - rhs
        return result

    def term() -> Polynomial:
        result = unary()
        while peek()[1] == "*":
            take()
            result = result * unary()
        return result

    def unary() -> Polynomial:
        if peek()[1] == "-":
            take()
            return -unary()
        if peek()[1] == "+":
            take()
            return unary()
        return power()

    def power() -> Polynomial:
        base = atom()
        if peek()[1] == "^":
            take()
            kind, value, col = take()
            if kind != "num" or not value.isdigit():
                raise PolynomialSyntaxError(f"exponent must be a nonnegative integer at column {col + 1}")
            base = base ** int(value)
        return base

    def atom() -> Polynomial:
        kind, value, col = take()
        if kind == "num":
            return Polynomial.constant(float(value), nvars)
        if kind == "name":
            if value not in names:
                raise PolynomialSyntaxError(f"unknown variable {value!r} at column {col + 1}")
            return Polynomial.variable(names.index(value), nvars)
        if value == "(":
            inner = expr()
            take(")")
            return inner
        raise PolynomialSyntaxError(f"unexpected {value!r} at column {col + 1}")

    if not tokens:
        raise PolynomialSyntaxError("empty expression")
    result = expr()
    if k != len(tokens):
        raise PolynomialSyntaxError(f"trailing input at column {tokens[k][2] + 1}")
    return result


def evaluate_many(p: Polynomial, points) -> np.ndarray:
    """Vectorized evaluation at the rows of ``points`` (plain float summation)."""
    Z = np.atleast_2d(np.asarray(points, dtype=float))
    if Z.shape[1] != p.nvars:
        raise ValueError(f"points have {Z.shape[1]} columns, expected {p.nvars}")
    out = np.zeros(Z.shape[0])
    for mono, coef in p.items():
        term = np.full(Z.shape[0], coef)
        for k, e in enumerate(mono):
            if e:
                term = term * Z[:, k] ** e
        out += term
    return out
