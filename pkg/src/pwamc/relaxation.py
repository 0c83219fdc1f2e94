"""Order-d moment relaxation of the occupation-measure LP and its dual.

Measures: one local occupation measure per cell on ``(x, u)`` and one terminal
measure on ``x``. Equality rows come from the test functions ``x^beta`` with
``|beta| <= 2d``; their multipliers are the coefficients of the value-function
approximation ``v_d``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from pwamc import moments as mom
from pwamc.polynomial import Monomial, Polynomial, evaluate_many, monomials_up_to
from pwamc.problem import Cell, InitialMeasure, PwaOcp, lie_map
from pwamc.sdp import ConicProgram, ConicSolution, LmiBlock, Status, solve

CERT_RTOL = 1e-6


class RelaxationError(ValueError):
    pass


@dataclass(frozen=True)
class AffineMap:
    """``z = scale * z' + offset`` coordinatewise, over states then inputs."""

    scale: np.ndarray
    offset: np.ndarray
    n: int

    @property
    def state_scale(self) -> np.ndarray:
        return self.scale[: self.n]

    @property
    def state_offset(self) -> np.ndarray:
        return self.offset[: self.n]

    def to_scaled_state(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.state_offset) / self.state_scale

    def pull(self, p: Polynomial) -> Polynomial:
        """Express a polynomial of original coordinates in scaled coordinates."""
        k = p.nvars
        return p.substitute_affine(np.diag(self.scale[:k]), self.offset[:k])

    def push_state(self, p: Polynomial) -> Polynomial:
        """Map a polynomial of scaled states back to original states."""
        s, o = self.state_scale, self.state_offset
        return p.substitute_affine(np.diag(1.0 / s), -o / s)

    def push(self, p: Polynomial) -> Polynomial:
        k = p.nvars
        s, o = self.scale[:k], self.offset[:k]
        return p.substitute_affine(np.diag(1.0 / s), -o / s)


def identity_map(ocp: PwaOcp) -> AffineMap:
    return AffineMap(np.ones(ocp.nvars), np.zeros(ocp.nvars), ocp.n)


def unit_box_map(ocp: PwaOcp) -> AffineMap:
    bounds = np.vstack([ocp.state_box, ocp.input_box])
    return AffineMap(0.5 * (bounds[:, 1] - bounds[:, 0]), 0.5 * (bounds[:, 1] + bounds[:, 0]), ocp.n)


def scale_problem(ocp: PwaOcp, amap: AffineMap) -> PwaOcp:
    """The same problem in coordinates ``z'`` with ``z = scale * z' + offset``."""
    n = ocp.n
    sx, ox = amap.state_scale, amap.state_offset
    su, ou = amap.scale[n:], amap.offset[n:]
    cells = []
    for c in ocp.cells:
        A = c.A * sx[None, :] / sx[:, None]
        a = (c.A @ ox + c.a + c.B @ ou) / sx
        B = c.B * su[None, :] / sx[:, None]
        cells.append(
            Cell(c.index, A, a, B, amap.pull(c.lagrangian), tuple(amap.pull(g) for g in c.guards))
        )
    meas = ocp.initial_measure
    if meas.kind == "dirac":
        new_meas = InitialMeasure.dirac(amap.to_scaled_state(meas.point))
    else:
        new_meas = InitialMeasure.uniform(amap.to_scaled_state(meas.lo), amap.to_scaled_state(meas.hi))
    bounds = np.vstack([ocp.state_box, ocp.input_box])
    new_bounds = (bounds - amap.offset[:, None]) / amap.scale[:, None]
    return PwaOcp(
        n=n,
        m=ocp.m,
        cells=tuple(cells),
        terminal_cost=amap.pull(ocp.terminal_cost),
        terminal_guards=tuple(amap.pull(g) for g in ocp.terminal_guards),
        initial_measure=new_meas,
        state_box=new_bounds[:n],
        input_box=new_bounds[n:],
        mass_bound=ocp.mass_bound,
        names=ocp.names,
    )


def minimum_order(ocp: PwaOcp) -> int:
    degs = [1, ocp.terminal_cost.degree]
    degs += [c.lagrangian.degree for c in ocp.cells]
    degs += [g.degree for c in ocp.cells for g in c.guards]
    degs += [g.degree for g in ocp.terminal_guards]
    return max(1, math.ceil(max(degs) / 2))


@dataclass
class BlockInfo:
    measure: int  # cell index, or -1 for the terminal measure
    guard: Polynomial | None  # None for the moment matrix
    template: mom.MatrixTemplate


@dataclass
class LmiRelaxation:
    order: int
    program: ConicProgram
    row_monomial: list[Monomial]
    var_layout: dict[tuple[int, int], int]
    offsets: list[int]  # variable offset of each measure; terminal measure last
    block_info: list[BlockInfo]
    mass_block: int | None
    ocp: PwaOcp  # the (possibly scaled) problem actually assembled

    def measure_vector(self, y: np.ndarray, measure: int) -> mom.MomentVector:
        k = len(self.ocp.cells) if measure < 0 else measure
        nv = self.ocp.n if measure < 0 else self.ocp.nvars
        basis = mom.MomentBasis(nv, self.order)
        return mom.MomentVector(basis, y[self.offsets[k] : self.offsets[k] + len(basis)])


def assemble(ocp: PwaOcp, d: int) -> LmiRelaxation:
    dmin = minimum_order(ocp)
    if d < dmin:
        raise RelaxationError(f"relaxation order {d} is below the minimum order {dmin}")
    n, nv, r = ocp.n, ocp.nvars, len(ocp.cells)
    local_basis = mom.MomentBasis(nv, d)
    term_basis = mom.MomentBasis(n, d)
    sizes = [len(local_basis)] * r + [len(term_basis)]
    offsets = list(np.cumsum([0] + sizes[:-1]))
    nvar = int(sum(sizes))
    var_layout = {}
    for k, size in enumerate(sizes):
        mid = k if k < r else -1
        for pos in range(size):
            key = (mid, pos)
            if key in var_layout:
                raise AssertionError("moment position registered twice")
            var_layout[key] = offsets[k] + pos
    if len(set(var_layout.values())) != nvar:
        raise AssertionError("variable layout is not a bijection")

    def column(p: Polynomial, k: int) -> dict[int, float]:
        basis = local_basis if k < r else term_basis
        if p.degree > basis.degree:
            raise RelaxationError(f"polynomial degree {p.degree} exceeds moment degree {basis.degree}")
        index = basis.index
        return {offsets[k] + index[m]: c for m, c in p.items()}

    c = np.zeros(nvar)
    for i, cell in enumerate(ocp.cells):
        for a, val in column(cell.lagrangian, i).items():
            c[a] += val
    for a, val in column(ocp.terminal_cost, r).items():
        c[a] += val

    rows = monomials_up_to(n, 2 * d)
    y0 = mom.analytic_moments(ocp.initial_measure, term_basis)
    F = np.zeros((len(rows), nvar))
    g = np.zeros(len(rows))
    for row, beta in enumerate(rows):
        v = Polynomial.monomial(beta)
        for i, cell in enumerate(ocp.cells):
            for a, val in column(lie_map(cell, v), i).items():
                F[row, a] += val
        F[row, offsets[r] + term_basis.index[beta]] += 1.0
        g[row] = y0[beta]

    blocks: list[LmiBlock] = []
    info: list[BlockInfo] = []

    def add_block(t: mom.MatrixTemplate, k: int, guard, name: str):
        coefs = {offsets[k] + pos: mat for pos, mat in t.coefficient_matrices().items()}
        blocks.append(LmiBlock(np.zeros((t.side, t.side)), coefs, name=name))
        info.append(BlockInfo(k if k < r else -1, guard, t))

    for i in range(r):
        add_block(mom.build_moment_template(nv, d), i, None, f"M(y{i + 1})")
        for kg, gpoly in enumerate(ocp.local_guards(i)):
            add_block(mom.build_localizing_template(gpoly, nv, d), i, gpoly, f"M(p{kg} y{i + 1})")
    add_block(mom.build_moment_template(n, d), r, None, "M(yT)")
    for kg, gpoly in enumerate(ocp.terminal_support_guards()):
        add_block(mom.build_localizing_template(gpoly, n, d), r, gpoly, f"M(pT{kg} yT)")

    mass_block = None
    if ocp.mass_bound is not None:
        mass_block = len(blocks)
        blocks.append(
            LmiBlock(
                np.array([[ocp.mass_bound]]),
                {offsets[i]: -np.ones((1, 1)) for i in range(r)},
                name="mass",
            )
        )

    referenced = set()
    for blk in blocks:
        referenced.update(blk.coefs)
    referenced.update(np.nonzero(c)[0].tolist())
    referenced.update(np.nonzero(F.any(axis=0))[0].tolist())
    if not referenced <= set(var_layout.values()):
        raise AssertionError("a referenced moment is missing from the variable layout")

    program = ConicProgram(nvar, c, F, g, blocks)
    return LmiRelaxation(d, program, rows, var_layout, offsets, info, mass_block, ocp)


@dataclass
class ValueFunctionApprox:
    v: Polynomial
    order: int
    lower_bound: float
    solver_gap: float
    scaled_v: Polynomial | None = None
    scaled_lower_bound: float | None = None


@dataclass
class CertificateReport:
    cell_residuals: list[float]
    cell_scales: list[float]
    terminal_residual: float
    terminal_scale: float
    hjb_min: list[float]
    hjb_argmin: list[list[float]]
    terminal_min: float
    mass_multiplier: float = 0.0

    @property
    def worst_hjb(self) -> float:
        return min(self.hjb_min, default=math.inf)

    def putinar_ok(self, rtol: float = CERT_RTOL) -> bool:
        pairs = list(zip(self.cell_residuals, self.cell_scales)) + [
            (self.terminal_residual, self.terminal_scale)
        ]
        return all(res <= rtol * (1.0 + scale) for res, scale in pairs)


def value_from_multipliers(relax: LmiRelaxation, lam: np.ndarray) -> Polynomial:
    n = relax.ocp.n
    return Polynomial(n, {beta: float(val) for beta, val in zip(relax.row_monomial, lam)})


def _gram_polynomial(Z: np.ndarray, half: int, nvars: int) -> Polynomial:
    basis = monomials_up_to(nvars, half)
    terms: dict[Monomial, float] = {}
    for i, mi in enumerate(basis):
        for j, mj in enumerate(basis):
            if Z[i, j] != 0.0:
                mono = tuple(a + b for a, b in zip(mi, mj))
                terms[mono] = terms.get(mono, 0.0) + Z[i, j]
    return Polynomial(nvars, terms)


def putinar_residuals(relax: LmiRelaxation, sol: ConicSolution, amap: AffineMap):
    """Coefficientwise residual of the SOS identities, mapped to original coordinates.

    For each cell: ``L_i - F_i(v) + z_mass - (s_0 + sum_k p_k s_k)``; for the
    terminal measure: ``L_T - v - (s_0 + sum_k p_k s_k)``.
    Returns ``(residual_norms, scales)`` with the terminal entry last.
    """
    ocp = relax.ocp
    r = len(ocp.cells)
    v = value_from_multipliers(relax, sol.eq_multipliers)
    z_mass = 0.0
    if relax.mass_block is not None:
        z_mass = float(sol.block_duals[relax.mass_block][0, 0])
    targets = []
    for i, cell in enumerate(ocp.cells):
        targets.append(cell.lagrangian - lie_map(cell, v) + z_mass)
    targets.append(ocp.terminal_cost - v)
    sos = [Polynomial.zero(ocp.nvars) for _ in range(r)] + [Polynomial.zero(ocp.n)]
    for info, Z in zip(relax.block_info, sol.block_duals):
        k = r if info.measure < 0 else info.measure
        nv = ocp.n if info.measure < 0 else ocp.nvars
        s = _gram_polynomial(Z, info.template.half_order, nv)
        sos[k] = sos[k] + (s if info.guard is None else info.guard * s)
    norms, scales = [], []
    for k, (target, rep) in enumerate(zip(targets, sos)):
        resid = target - rep
        if k < r:
            resid, target = amap.push(resid), amap.push(target)
        else:
            resid, target = amap.push_state(resid), amap.push_state(target)
        norms.append(resid.max_abs_coefficient())
        scales.append(target.max_abs_coefficient())
    return norms, scales, z_mass


def _grid(box: np.ndarray, points: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, points) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1) if axes else np.zeros((1, 0))


def sampled_hjb(ocp: PwaOcp, v: Polynomial, points: int | None = None):
    """Minimum of ``grad v . f_i + L_i`` over a grid of each cell times the input box."""
    nv = ocp.nvars
    if points is None:
        points = 201 if nv <= 2 else max(5, int(round(201 ** (2.0 / nv))))
    Zg = _grid(np.vstack([ocp.state_box, ocp.input_box]), points)
    X, U = Zg[:, : ocp.n], Zg[:, ocp.n :]
    grads = [evaluate_many(v.partial_derivative(k), X) for k in range(ocp.n)]
    mins, argmins = [], []
    for cell in ocp.cells:
        inside = np.ones(len(Zg), dtype=bool)
        for gpoly in cell.guards:
            inside &= evaluate_many(gpoly, Zg) >= -1e-12
        if not inside.any():
            mins.append(math.inf)
            argmins.append([])
            continue
        f = X @ cell.A.T + cell.a + U @ cell.B.T
        val = sum(grads[k] * f[:, k] for k in range(ocp.n)) + evaluate_many(cell.lagrangian, Zg)
        val = np.where(inside, val, np.inf)
        k = int(np.argmin(val))
        mins.append(float(val[k]))
        argmins.append(Zg[k].tolist())
    return mins, argmins


def sampled_terminal(ocp: PwaOcp, v: Polynomial, points: int = 201) -> float:
    """Minimum of ``L_T - v`` over grid points of the target set (and its pinned point)."""
    X = _grid(ocp.state_box, points if ocp.n <= 2 else 11)
    try:
        X = np.vstack([X, ocp.terminal_point()[None, :]])
    except ValueError:
        pass
    inside = np.ones(len(X), dtype=bool)
    for gpoly in ocp.terminal_guards:
        inside &= evaluate_many(gpoly, X) >= -1e-9
    if not inside.any():
        return math.inf
    val = evaluate_many(ocp.terminal_cost, X[inside]) - evaluate_many(v, X[inside])
    return float(val.min())


def verify_certificate(
    ocp: PwaOcp,
    relax: LmiRelaxation,
    v: Polynomial,
    sol: ConicSolution,
    amap: AffineMap,
    points: int | None = None,
) -> CertificateReport:
    norms, scales, z_mass = putinar_residuals(relax, sol, amap)
    hjb, arg = sampled_hjb(ocp, v, points)
    return CertificateReport(
        cell_residuals=norms[:-1],
        cell_scales=scales[:-1],
        terminal_residual=norms[-1],
        terminal_scale=scales[-1],
        hjb_min=hjb,
        hjb_argmin=arg,
        terminal_min=sampled_terminal(ocp, v),
        mass_multiplier=z_mass,
    )


@dataclass
class OrderResult:
    order: int
    status: Status
    value: ValueFunctionApprox | None
    certificate: CertificateReport | None
    solution: ConicSolution | None
    relaxation: LmiRelaxation | None
    timings: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def lower_bound(self) -> float:
        return self.value.lower_bound if self.value is not None else math.nan


def solve_order(
    ocp: PwaOcp,
    d: int,
    scaling: bool = True,
    tol: float = 1e-8,
    max_iter: int = 200,
    certify: bool = True,
    hjb_points: int | None = None,
) -> OrderResult:
    """Assemble, solve and certify one relaxation order; results in original coordinates."""
    amap = unit_box_map(ocp) if scaling else identity_map(ocp)
    work = scale_problem(ocp, amap) if scaling else ocp
    t0 = time.perf_counter()
    relax = assemble(work, d)
    t1 = time.perf_counter()
    sol = solve(relax.program, tol=tol, max_iter=max_iter)
    t2 = time.perf_counter()
    timings = {"assemble": t1 - t0, "solve": t2 - t1}
    if sol.status is not Status.OPTIMAL:
        return OrderResult(d, sol.status, None, None, sol, relax, timings, error=sol.status.value)
    v_scaled = value_from_multipliers(relax, sol.eq_multipliers)
    v = amap.push_state(v_scaled) if scaling else v_scaled
    vfa = ValueFunctionApprox(
        v=v,
        order=d,
        lower_bound=sol.primal_objective,
        solver_gap=sol.gap,
        scaled_v=v_scaled,
        scaled_lower_bound=sol.primal_objective,
    )
    cert = None
    if certify:
        cert = verify_certificate(ocp, relax, v, sol, amap, hjb_points)
        timings["certify"] = time.perf_counter() - t2
    return OrderResult(d, sol.status, vfa, cert, sol, relax, timings)


def hierarchy(ocp: PwaOcp, d_max: int, d_min: int | None = None, **kwargs) -> list[OrderResult]:
    """Solve orders ``d_min..d_max``; a failed order is recorded and the rest still run."""
    lo = minimum_order(ocp)
    if d_max < lo:
        raise RelaxationError(f"d_max = {d_max} is below the minimum relaxation order {lo}")
    start = lo if d_min is None else max(lo, d_min)
    results = []
    for d in range(start, d_max + 1):
        try:
            results.append(solve_order(ocp, d, **kwargs))
        except (RelaxationError, np.linalg.LinAlgError) as exc:
            results.append(OrderResult(d, Status.NUMERICAL_FAILURE, None, None, None, None, error=str(exc)))
    return results
