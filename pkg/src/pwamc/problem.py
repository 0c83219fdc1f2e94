"""Piecewise-affine optimal control problems: data model, file format, Lie map.

Polynomials describing cells live in the joint variable list
``(x1..xn, u1..um)``; terminal data live in ``(x1..xn)`` only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from pwamc.polynomial import Polynomial, PolynomialSyntaxError, default_names, parse_polynomial

TOL_GUARD = 1e-9


class ProblemError(ValueError):
    """Invalid problem description; the message names the offending field."""


class CellLookupError(LookupError):
    """No cell of the model contains the requested point."""


@dataclass(frozen=True)
class InitialMeasure:
    kind: str  # "dirac" or "uniform"
    point: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    @classmethod
    def dirac(cls, point) -> InitialMeasure:
        return cls("dirac", point=np.asarray(point, dtype=float).reshape(-1))

    @classmethod
    def uniform(cls, lo, hi) -> InitialMeasure:
        lo = np.asarray(lo, dtype=float).reshape(-1)
        hi = np.asarray(hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ProblemError("initial.uniform: need lo < hi componentwise")
        return cls("uniform", lo=lo, hi=hi)

    @property
    def dim(self) -> int:
        return (self.point if self.kind == "dirac" else self.lo).size


@dataclass(frozen=True)
class Cell:
    index: int
    A: np.ndarray
    a: np.ndarray
    B: np.ndarray
    lagrangian: Polynomial
    guards: tuple[Polynomial, ...] = ()

    def vector_field(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.a + self.B @ np.asarray(u, dtype=float)

    def guard_values(self, x, u) -> np.ndarray:
        z = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])
        return np.array([g.evaluate(z) for g in self.guards])


@dataclass(frozen=True)
class PwaOcp:
    n: int
    m: int
    cells: tuple[Cell, ...]
    terminal_cost: Polynomial
    terminal_guards: tuple[Polynomial, ...]
    initial_measure: InitialMeasure
    state_box: np.ndarray  # shape (n, 2)
    input_box: np.ndarray  # shape (m, 2)
    mass_bound: float | None = None
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.names:
            object.__setattr__(self, "names", tuple(default_names(self.n + self.m, self.n)))
        validate(self)

    @property
    def nvars(self) -> int:
        return self.n + self.m

    @property
    def state_names(self) -> list[str]:
        return list(self.names[: self.n])

    def box_guards(self) -> list[Polynomial]:
        """Degree-1 guards ``z - lo >= 0`` and ``hi - z >= 0`` for every state and input."""
        nv = self.nvars
        bounds = np.vstack([self.state_box, self.input_box])
        out = []
        for k in range(nv):
            z = Polynomial.variable(k, nv)
            lo, hi = bounds[k]
            out.append(z - lo)
            out.append(hi - z)
        return out

    def state_box_guards(self) -> list[Polynomial]:
        out = []
        for k in range(self.n):
            z = Polynomial.variable(k, self.n)
            lo, hi = self.state_box[k]
            out.append(z - lo)
            out.append(hi - z)
        return out

    def local_guards(self, i: int) -> list[Polynomial]:
        return list(self.cells[i].guards) + self.box_guards()

    def terminal_support_guards(self) -> list[Polynomial]:
        return list(self.terminal_guards) + self.state_box_guards()

    def initial_point(self) -> np.ndarray:
        if self.initial_measure.kind != "dirac":
            raise ProblemError("initial measure is not a Dirac; supply x0 explicitly")
        return self.initial_measure.point.copy()

    def in_state_box(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.state_box[:, 0] - tol) and np.all(x <= self.state_box[:, 1] + tol))

    def terminal_point(self) -> np.ndarray:
        """Point of the target set, assuming it is pinned by opposing linear guards."""
        lo = self.state_box[:, 0].astype(float).copy()
        hi = self.state_box[:, 1].astype(float).copy()
        for g in self.terminal_guards:
            if g.degree != 1:
                continue
            lin = [(k, g.coefficient(tuple(int(j == k) for j in range(self.n)))) for k in range(self.n)]
            active = [(k, c) for k, c in lin if c != 0.0]
            if len(active) != 1:
                continue
            k, c = active[0]
            bound = -g.coefficient((0,) * self.n) / c
            if c > 0:
                lo[k] = max(lo[k], bound)
            else:
                hi[k] = min(hi[k], bound)
        if not np.allclose(lo, hi):
            raise ProblemError("terminal set is not a single point; supply x_T explicitly")
        return 0.5 * (lo + hi)


def _as_matrix(value, shape, where: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"{where}: not a numeric array ({exc})") from None
    if shape[1] is None:
        arr = arr.reshape(-1) if arr.ndim <= 1 else arr
        if arr.shape != (shape[0],):
            raise ProblemError(f"{where}: expected length {shape[0]}, got shape {arr.shape}")
    else:
        if arr.ndim == 1 and shape[0] * shape[1] == arr.size and shape[0] == 1:
            arr = arr.reshape(shape)
        if arr.shape != shape:
            raise ProblemError(f"{where}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ProblemError(f"{where}: non-finite entry")
    return arr


def validate(ocp: PwaOcp) -> None:
    n, m = ocp.n, ocp.m
    if n < 1 or m < 0:
        raise ProblemError("n must be >= 1 and m >= 0")
    if not ocp.cells:
        raise ProblemError("cells: at least one cell is required")
    for i, cell in enumerate(ocp.cells):
        where = f"cells[{i}]"
        if cell.A.shape != (n, n):
            raise ProblemError(f"{where}.A: expected shape {(n, n)}, got {cell.A.shape}")
        if cell.a.shape != (n,):
            raise ProblemError(f"{where}.a: expected length {n}, got shape {cell.a.shape}")
        if cell.B.shape != (n, m):
            raise ProblemError(f"{where}.B: expected shape {(n, m)}, got {cell.B.shape}")
        if cell.lagrangian.nvars != n + m:
            raise ProblemError(f"{where}.lagrangian: expected {n + m} variables")
        for k, g in enumerate(cell.guards):
            if g.nvars != n + m:
                raise ProblemError(f"{where}.guards[{k}]: expected {n + m} variables")
    if ocp.terminal_cost.nvars != n:
        raise ProblemError(f"terminal_cost: expected {n} variables")
    for k, g in enumerate(ocp.terminal_guards):
        if g.nvars != n:
            raise ProblemError(f"terminal_guards[{k}]: expected {n} variables")
    for name, box, dim in (("state_box", ocp.state_box, n), ("input_box", ocp.input_box, m)):
        if box.shape != (dim, 2):
            raise ProblemError(f"{name}: expected {dim} intervals [lo, hi]")
        if not np.all(np.isfinite(box)):
            raise ProblemError(f"{name}: unbounded interval")
        if not np.all(box[:, 0] < box[:, 1]):
            raise ProblemError(f"{name}: empty interval (need lo < hi)")
    if ocp.mass_bound is not None and not ocp.mass_bound > 0:
        raise ProblemError("mass_bound: must be strictly positive")
    meas = ocp.initial_measure
    if meas.dim != n:
        raise ProblemError(f"initial: expected dimension {n}")
    if meas.kind == "dirac" and not ocp.in_state_box(meas.point):
        raise ProblemError("initial.dirac: point lies outside state_box")
    if meas.kind not in ("dirac", "uniform"):
        raise ProblemError(f"initial: unknown kind {meas.kind!r}")


_TOP_FIELDS = {
    "n", "m", "cells", "terminal_cost", "terminal_guards", "initial",
    "state_box", "input_box", "mass_bound",
}
_CELL_FIELDS = {"A", "a", "B", "lagrangian", "guards"}


def _poly(text: Any, names: Sequence[str], where: str) -> Polynomial:
    if isinstance(text, (int, float)):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ProblemError(f"{where}: polynomial must be a string")
    try:
        return parse_polynomial(text, names)
    except PolynomialSyntaxError as exc:
        raise ProblemError(f"{where}: {exc}") from None


def parse_problem(text: str) -> PwaOcp:
    """Parse and validate a JSON problem description."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ProblemError("top level must be a JSON object")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ProblemError(f"unknown field(s): {', '.join(sorted(unknown))}")
    for req in ("n", "m", "cells", "initial", "state_box", "input_box"):
        if req not in doc:
            raise ProblemError(f"{req}: missing required field")
    n, m = doc["n"], doc["m"]
    if not isinstance(n, int) or not isinstance(m, int) or n < 1 or m < 0:
        raise ProblemError("n, m: must be integers with n >= 1, m >= 0")
    joint = default_names(n + m, n)
    state = joint[:n]

    cells_doc = doc["cells"]
    if not isinstance(cells_doc, list) or not cells_doc:
        raise ProblemError("cells: at least one cell is required")
    cells = []
    for i, cd in enumerate(cells_doc):
        where = f"cells[{i}]"
        if not isinstance(cd, dict):
            raise ProblemError(f"{where}: must be an object")
        unknown = set(cd) - _CELL_FIELDS
        if unknown:
            raise ProblemError(f"{where}: unknown field(s): {', '.join(sorted(unknown))}")
        for req in ("A", "a", "B", "lagrangian"):
            if req not in cd:
                raise ProblemError(f"{where}.{req}: missing required field")
        cells.append(
            Cell(
                index=i,
                A=_as_matrix(cd["A"], (n, n), f"{where}.A"),
                a=_as_matrix(cd["a"], (n, None), f"{where}.a"),
                B=_as_matrix(cd["B"], (n, m), f"{where}.B") if m else np.zeros((n, 0)),
                lagrangian=_poly(cd["lagrangian"], joint, f"{where}.lagrangian"),
                guards=tuple(
                    _poly(g, joint, f"{where}.guards[{k}]") for k, g in enumerate(cd.get("guards", []))
                ),
            )
        )

    init = doc["initial"]
    if not isinstance(init, dict) or len(init) != 1 or not set(init) <= {"dirac", "uniform"}:
        raise ProblemError('initial: expected {"dirac": [...]} or {"uniform": {"lo": [...], "hi": [...]}}')
    if "dirac" in init:
        meas = InitialMeasure.dirac(_as_matrix(init["dirac"], (n, None), "initial.dirac"))
    else:
        u = init["uniform"]
        if not isinstance(u, dict) or set(u) != {"lo", "hi"}:
            raise ProblemError("initial.uniform: expected fields lo and hi")
        meas = InitialMeasure.uniform(
            _as_matrix(u["lo"], (n, None), "initial.uniform.lo"),
            _as_matrix(u["hi"], (n, None), "initial.uniform.hi"),
        )

    def box(name, dim):
        val = doc[name]
        if val is None:
            raise ProblemError(f"{name}: unbounded box (a finite interval per coordinate is required)")
        try:
            arr = np.array(val, dtype=float)
        except (TypeError, ValueError):
            raise ProblemError(f"{name}: not a numeric array") from None
        if dim == 0 and arr.size == 0:
            return np.zeros((0, 2))
        if arr.shape != (dim, 2):
            raise ProblemError(f"{name}: expected {dim} intervals [lo, hi], got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ProblemError(f"{name}: unbounded interval")
        return arr

    mass = doc.get("mass_bound")
    if mass is not None and not isinstance(mass, (int, float)):
        raise ProblemError("mass_bound: must be a number or null")

    return PwaOcp(
        n=n,
        m=m,
        cells=tuple(cells),
        terminal_cost=_poly(doc.get("terminal_cost", "0"), state, "terminal_cost"),
        terminal_guards=tuple(
            _poly(g, state, f"terminal_guards[{k}]") for k, g in enumerate(doc.get("terminal_guards", []))
        ),
        initial_measure=meas,
        state_box=box("state_box", n),
        input_box=box("input_box", m),
        mass_bound=None if mass is None else float(mass),
    )


def render_problem(ocp: PwaOcp) -> str:
    """Serialize to the JSON problem format; ``parse_problem`` inverts it exactly."""
    joint = list(ocp.names)
    state = ocp.state_names
    meas = ocp.initial_measure
    if meas.kind == "dirac":
        init = {"dirac": meas.point.tolist()}
    else:
        init = {"uniform": {"lo": meas.lo.tolist(), "hi": meas.hi.tolist()}}
    doc = {
        "n": ocp.n,
        "m": ocp.m,
        "cells": [
            {
                "A": c.A.tolist(),
                "a": c.a.tolist(),
                "B": c.B.tolist(),
                "lagrangian": c.lagrangian.to_string(joint),
                "guards": [g.to_string(joint) for g in c.guards],
            }
            for c in ocp.cells
        ],
        "terminal_cost": ocp.terminal_cost.to_string(state),
        "terminal_guards": [g.to_string(state) for g in ocp.terminal_guards],
        "initial": init,
        "state_box": ocp.state_box.tolist(),
        "input_box": ocp.input_box.tolist(),
        "mass_bound": ocp.mass_bound,
    }
    return json.dumps(doc, indent=2)


def builtin_example(
    state_box=((-2.0, 2.0),), input_box=((-4.0, 4.0),), mass_bound: float | None = 20.0
) -> PwaOcp:
    """Two-cell scalar example: xdot = -x+1+u on x >= 0, x+1+u on x <= 0, from -1 to 1."""
    x = Polynomial.variable(0, 2)
    u = Polynomial.variable(1, 2)
    lag = 2 * (x - 1) ** 2 + u**2
    xs = Polynomial.variable(0, 1)
    return PwaOcp(
        n=1,
        m=1,
        cells=(
            Cell(0, np.array([[-1.0]]), np.array([1.0]), np.array([[1.0]]), lag, (x,)),
            Cell(1, np.array([[1.0]]), np.array([1.0]), np.array([[1.0]]), lag, (-x,)),
        ),
        terminal_cost=Polynomial.zero(1),
        terminal_guards=(xs - 1, 1 - xs),
        initial_measure=InitialMeasure.dirac([-1.0]),
        state_box=np.array(state_box, dtype=float),
        input_box=np.array(input_box, dtype=float),
        mass_bound=mass_bound,
    )


def lie_map(cell: Cell, v: Polynomial) -> Polynomial:
    """Return ``-grad(v) . (A x + a + B u)`` as a polynomial in ``(x, u)``."""
    n, m = cell.A.shape[0], cell.B.shape[1]
    if v.nvars == n + m:
        if any(v.uses_variable(n + j) for j in range(m)):
            raise ValueError("test function must depend on the state variables only")
        v = v.restrict(range(n))
    elif v.nvars != n:
        raise ValueError(f"test function must have {n} state variables, got {v.nvars}")
    nv = n + m
    z = [Polynomial.variable(k, nv) for k in range(nv)]
    out = Polynomial.zero(nv)
    for k in range(n):
        dv = v.partial_derivative(k)
        if dv.is_zero():
            continue
        fk = Polynomial.constant(cell.a[k], nv)
        for j in range(n):
            if cell.A[k, j] != 0.0:
                fk = fk + cell.A[k, j] * z[j]
        for j in range(m):
            if cell.B[k, j] != 0.0:
                fk = fk + cell.B[k, j] * z[n + j]
        out = out - dv.embed(nv, range(n)) * fk
    return out


def _guard_rate(guard: Polynomial, z: np.ndarray, xdot: np.ndarray, n: int) -> float:
    return float(sum(guard.partial_derivative(k).evaluate(z) * xdot[k] for k in range(n)))


def classify_cell(ocp: PwaOcp, x, u_hint=None, tol: float = TOL_GUARD) -> int:
    """Index of a cell containing ``x``; on shared boundaries prefer the cell being entered."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.zeros(ocp.m) if u_hint is None else np.asarray(u_hint, dtype=float).reshape(-1)
    z = np.concatenate([x, u])
    candidates = []
    for cell in ocp.cells:
        vals = np.array([g.evaluate(z) for g in cell.guards])
        if np.all(vals >= -tol):
            candidates.append((cell, vals))
    if not candidates:
        raise CellLookupError(f"no cell contains x = {x.tolist()}")
    if len(candidates) == 1:
        return candidates[0][0].index
    best, best_score = None, -np.inf
    for cell, vals in candidates:
        xdot = cell.vector_field(x, u)
        active = [g for g, val in zip(cell.guards, vals) if abs(val) <= tol]
        score = min((_guard_rate(g, z, xdot, ocp.n) for g in active), default=np.inf)
        if score > best_score:
            best, best_score = cell.index, score
    return best


def boundary_consistency(ocp: PwaOcp, samples: int = 1000, seed: int = 0, tol: float = 1e-6) -> dict:
    """Sampled check that the global vector field agrees across shared cell boundaries.

    Random pairs of points in different cells are bisected to a boundary point;
    every cell feasible there is evaluated at a random input and the largest
    field mismatch is reported.
    """
    rng = np.random.default_rng(seed)
    lo, hi = ocp.state_box[:, 0], ocp.state_box[:, 1]
    ulo, uhi = ocp.input_box[:, 0], ocp.input_box[:, 1]

    def owner(x):
        try:
            return classify_cell(ocp, x, np.zeros(ocp.m), tol=0.0)
        except CellLookupError:
            return None

    pts = rng.uniform(lo, hi, size=(max(2 * samples, 2), ocp.n))
    owners = [owner(p) for p in pts]
    worst, worst_point, checked = 0.0, None, 0
    for k in range(0, len(pts) - 1, 2):
        p, q, i, j = pts[k], pts[k + 1], owners[k], owners[k + 1]
        if i is None or j is None or i == j:
            continue
        a, b = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (a + b)
            if owner(p + mid * (q - p)) == i:
                a = mid
            else:
                b = mid
        xb = p + 0.5 * (a + b) * (q - p)
        u = rng.uniform(ulo, uhi) if ocp.m else np.zeros(0)
        z = np.concatenate([xb, u])
        fields = [c.vector_field(xb, u) for c in ocp.cells if all(g.evaluate(z) >= -1e-8 for g in c.guards)]
        for f1 in fields:
            for f2 in fields:
                gap = float(np.max(np.abs(f1 - f2)))
                if gap > worst:
                    worst, worst_point = gap, xb.tolist()
        checked += 1
    return {
        "boundary_points": checked,
        "max_mismatch": worst,
        "worst_point": worst_point,
        "consistent": worst <= tol,
    }
