"""Dense primal-dual interior-point solver for block-LMI programs.

Problem form (free variables ``y``)::

    minimize    c^T y
    subject to  F y = g
                S_j := B_j + sum_a y_a A_{j,a}  >= 0     (PSD, every block j)
                y_k >= lb_k                              (optional bounds)

with the Lagrange dual::

    maximize    g^T lam - sum_j <B_j, Z_j>
    subject to  sum_j A_j^*(Z_j) + F^T lam = c,   Z_j >= 0.

The iteration is an infeasible-start path-following method with Nesterov-Todd
scaling and a Mehrotra predictor-corrector. The Newton system is solved in the
null space of ``F`` by a QR factorization of the scaled operator (see
``_Newton``), followed by refinement against unscaled residuals.

``gap`` is reported relative: ``|pobj - dobj| / (1 + |pobj| + |dobj|)``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class LmiBlock:
    """``const + sum_a y_a * coefs[a] >= 0``; every matrix symmetric."""

    const: np.ndarray
    coefs: dict[int, np.ndarray]
    name: str = ""

    @property
    def side(self) -> int:
        return self.const.shape[0]

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for a, mat in self.coefs.items():
            if y[a] != 0.0:
                out += y[a] * mat
        return out


@dataclass
class ConicProgram:
    nvar: int
    c: np.ndarray
    F: np.ndarray
    g: np.ndarray
    blocks: list[LmiBlock]
    lower_bounds: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.F = np.asarray(self.F, dtype=float).reshape(-1, self.nvar)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if self.c.size != self.nvar:
            raise ValueError("objective length does not match nvar")
        if self.F.shape[0] != self.g.size:
            raise ValueError("equality matrix and right-hand side disagree")
        for j, blk in enumerate(self.blocks):
            s = blk.side
            if blk.const.shape != (s, s) or not np.allclose(blk.const, blk.const.T, atol=0.0):
                raise ValueError(f"block {j}: constant term must be square symmetric")
            for a, mat in blk.coefs.items():
                if not 0 <= a < self.nvar:
                    raise ValueError(f"block {j}: variable index {a} out of range")
                if mat.shape != (s, s) or not np.array_equal(mat, mat.T):
                    raise ValueError(f"block {j}: coefficient of y[{a}] must be {s}x{s} symmetric")
        for k in self.lower_bounds:
            if not 0 <= k < self.nvar:
                raise ValueError(f"bound on out-of-range variable {k}")

    def all_blocks(self) -> list[LmiBlock]:
        """User blocks followed by 1x1 blocks encoding the lower bounds."""
        extra = [
            LmiBlock(np.array([[-lb]]), {k: np.ones((1, 1))}, name=f"bound[{k}]")
            for k, lb in sorted(self.lower_bounds.items())
        ]
        return list(self.blocks) + extra


@dataclass
class ConicSolution:
    status: Status
    y: np.ndarray
    eq_multipliers: np.ndarray
    block_duals: list[np.ndarray]
    primal_objective: float
    dual_objective: float
    gap: float
    iterations: int
    primal_infeasibility: float = math.nan
    dual_infeasibility: float = math.nan
    bound_duals: dict[int, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    removed_rows: list[int] = field(default_factory=list)
    equality_residual: float = math.nan
    block_min_eigenvalues: list[float] = field(default_factory=list)
    complementarity: list[float] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class PreprocessReport:
    removed_zero: list[int]
    removed_dependent: list[int]
    inconsistent: bool
    kept: list[int]

    @property
    def removed(self) -> list[int]:
        return sorted(self.removed_zero + self.removed_dependent)


def preprocess(p: ConicProgram, rank_tol: float = 1e-10) -> tuple[ConicProgram, PreprocessReport]:
    """Drop zero and linearly dependent equality rows (pivoted QR on F^T)."""
    F, g = p.F, p.g
    norms = np.abs(F).max(axis=1) if F.size else np.zeros(F.shape[0])
    zero = [i for i in range(F.shape[0]) if norms[i] == 0.0]
    inconsistent = any(g[i] != 0.0 for i in zero)
    nonzero = [i for i in range(F.shape[0]) if norms[i] != 0.0]
    kept, dependent = list(nonzero), []
    if nonzero:
        Fn = F[nonzero] / norms[nonzero, None]
        gn = g[nonzero] / norms[nonzero]
        _, R, piv = sla.qr(Fn.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > rank_tol * max(diag.max(initial=0.0), 1.0)))
        indep = sorted(piv[:rank].tolist())
        kept = [nonzero[i] for i in indep]
        dependent = sorted(nonzero[i] for i in piv[rank:].tolist())
        if dependent:
            # dependent rows must be implied by the kept ones
            coef, *_ = np.linalg.lstsq(Fn[indep].T, Fn[piv[rank:]].T, rcond=None)
            implied = coef.T @ gn[indep]
            mismatch = np.abs(implied - gn[piv[rank:]])
            if np.any(mismatch > 1e-8 * (1.0 + np.abs(gn).max())):
                inconsistent = True
    out = ConicProgram(p.nvar, p.c, F[kept], g[kept], p.blocks, dict(p.lower_bounds))
    return out, PreprocessReport(zero, dependent, inconsistent, kept)


@dataclass
class ResidualReport:
    equality_residual: float
    block_min_eigenvalues: list[float]
    dual_residual: float
    dual_min_eigenvalues: list[float]
    complementarity: list[float]
    primal_objective: float
    dual_objective: float
    gap: float

    @property
    def primal_feasible(self) -> float:
        """Worst primal violation: equality residual or negative block eigenvalue."""
        return max([self.equality_residual] + [max(0.0, -e) for e in self.block_min_eigenvalues])


def residuals(p: ConicProgram, s: ConicSolution) -> ResidualReport:
    """Recompute feasibility, complementarity and gap directly from the data."""
    y = np.asarray(s.y, dtype=float)
    if y.size != p.nvar:
        raise ValueError("solution does not match the program's variable count")
    eq = float(np.max(np.abs(p.F @ y - p.g))) if p.g.size else 0.0
    blocks = p.all_blocks()
    duals = list(s.block_duals) + [np.array([[s.bound_duals.get(k, 0.0)]]) for k in sorted(p.lower_bounds)]
    mins, dmins, comp = [], [], []
    grad = p.c.copy()
    if p.g.size:
        grad -= p.F.T @ s.eq_multipliers
    dobj = float(p.g @ s.eq_multipliers) if p.g.size else 0.0
    for blk, Z in zip(blocks, duals):
        S = blk.evaluate(y)
        mins.append(float(np.linalg.eigvalsh(S)[0]))
        dmins.append(float(np.linalg.eigvalsh(Z)[0]))
        comp.append(float(np.sum(S * Z)))
        for a, mat in blk.coefs.items():
            grad[a] -= np.sum(mat * Z)
        dobj -= float(np.sum(blk.const * Z))
    pobj = float(p.c @ y)
    return ResidualReport(
        equality_residual=eq,
        block_min_eigenvalues=mins,
        dual_residual=float(np.max(np.abs(grad))) if grad.size else 0.0,
        dual_min_eigenvalues=dmins,
        complementarity=comp,
        primal_objective=pobj,
        dual_objective=dobj,
        gap=_relative_gap(pobj, dobj),
    )


class _Block:
    """Stacked dense representation of one LMI block."""

    def __init__(self, blk: LmiBlock, scale: float):
        self.vars = np.array(sorted(blk.coefs), dtype=int)
        s = blk.side
        self.A = (
            np.stack([blk.coefs[a] for a in self.vars]) / scale
            if len(self.vars)
            else np.zeros((0, s, s))
        )
        self.B = blk.const / scale
        self.side = s

    def op(self, y):
        if not len(self.vars):
            return np.zeros((self.side, self.side))
        return np.tensordot(y[self.vars], self.A, axes=1)

    def adj(self, X, out):
        if len(self.vars):
            np.add.at(out, self.vars, np.einsum("kab,ab->k", self.A, X))


def _nt_scaling(S, Z):
    """Return G, d, G^{-1} with G diag(d) G^T = S and G^{-T} diag(d) G^{-1} = Z."""
    Ls = np.linalg.cholesky(S)
    Lz = np.linalg.cholesky(Z)
    U, d, Vt = np.linalg.svd(Lz.T @ Ls)
    rd = np.sqrt(d)
    G = Ls @ Vt.T / rd
    # G^{-1} = D^{1/2} V^T Ls^{-1} = D^{-1/2} U^T Lz^T
    Ginv = (U.T @ Lz.T) / rd[:, None]
    return G, d, Ginv


def _interior_update(X, dX, alpha, tries: int = 30):
    """``X + alpha dX`` with alpha backtracked until every block factors."""
    for _ in range(tries):
        out = [_sym(Xi + alpha * d) for Xi, d in zip(X, dX)]
        try:
            for o in out:
                np.linalg.cholesky(o)
            return out, alpha
        except np.linalg.LinAlgError:
            alpha *= 0.8
    return None, 0.0


def _relative_gap(pobj: float, dobj: float) -> float:
    return abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))


def _sym(M):
    return 0.5 * (M + M.T)


def _max_step(d, dX):
    """Largest alpha with diag(d) + alpha dX >= 0 (may be inf)."""
    r = 1.0 / np.sqrt(d)
    lam = np.linalg.eigvalsh(r[:, None] * dX * r[None, :])[0]
    return math.inf if lam >= 0 else -1.0 / lam


def solve(
    p: ConicProgram,
    tol: float = 1e-8,
    max_iter: int = 200,
    step_fraction: float = 0.98,
    verbose: bool = False,
) -> ConicSolution:
    if tol <= 0:
        raise ValueError("tol must be positive")
    clean, report = preprocess(p)
    if report.inconsistent:
        return _failure(p, Status.PRIMAL_INFEASIBLE, 0, report.removed)

    n = clean.nvar
    blocks_in = clean.all_blocks()
    # variables touching no block: fixed by equalities or free along c
    touched = np.zeros(n, dtype=bool)
    for blk in blocks_in:
        touched[list(blk.coefs)] = True

    # equilibration: equality rows to unit inf-norm, blocks to unit scale, objective to unit norm
    F, g = clean.F.copy(), clean.g.copy()
    row_scale = np.ones(F.shape[0])
    for _ in range(10):
        r = np.sqrt(np.abs(F).max(axis=1)) if F.size else np.ones(0)
        r[r == 0] = 1.0
        F /= r[:, None]
        g /= r
        row_scale /= r
        if np.all(np.abs(r - 1.0) < 1e-3):
            break
    blk_scale = []
    for blk in blocks_in:
        mags = [np.abs(blk.const).max()] + [np.abs(m).max() for m in blk.coefs.values()]
        blk_scale.append(max(max(mags), 1e-300))
    blocks = [_Block(b, s) for b, s in zip(blocks_in, blk_scale)]
    obj_scale = max(np.abs(clean.c).max(initial=0.0), 1e-300) if np.any(clean.c) else 1.0
    c = clean.c / obj_scale

    if np.any(~touched):
        # an untouched variable with nonzero cost and no equality is unbounded
        free = ~touched & (np.abs(F).sum(axis=0) == 0 if F.size else True)
        if np.any(np.asarray(c)[free] != 0.0):
            return _failure(p, Status.DUAL_INFEASIBLE, 0, report.removed)

    total_side = sum(b.side for b in blocks)
    m_eq = F.shape[0]
    eq = _Equalities(F)
    y = np.zeros(n)
    lam = np.zeros(m_eq)
    S, Z = [], []
    for b in blocks:
        a_norm = max((np.linalg.norm(A) for A in b.A), default=0.0)
        xi_z = max(10.0, math.sqrt(b.side), b.side * (1.0 + np.abs(c).max(initial=0.0)) / (1.0 + a_norm))
        xi_s = max(10.0, math.sqrt(b.side), np.linalg.norm(b.B))
        S.append(xi_s * np.eye(b.side))
        Z.append(xi_z * np.eye(b.side))

    norm_B = math.sqrt(sum(np.sum(b.B**2) for b in blocks))
    norm_g = np.linalg.norm(g)
    norm_c = np.linalg.norm(c)
    history: list[dict] = []
    status = Status.MAX_ITERATIONS
    it = 0
    best = (math.inf, 0, y, lam, S, Z)

    def measures(y, lam, S, Z):
        rp = [Si - b.B - b.op(y) for b, Si in zip(blocks, S)]
        re = g - F @ y
        rd = c.copy()
        for b, Zi in zip(blocks, Z):
            b.adj(-Zi, rd)
        rd -= F.T @ lam
        pobj = float(c @ y)
        dobj = float(g @ lam) - sum(float(np.sum(b.B * Zi)) for b, Zi in zip(blocks, Z))
        pinf = max(
            math.sqrt(sum(np.sum(r**2) for r in rp)) / (1.0 + norm_B),
            np.linalg.norm(re) / (1.0 + norm_g) if m_eq else 0.0,
        )
        dinf = np.linalg.norm(rd) / (1.0 + norm_c)
        return rp, re, rd, pobj, dobj, pinf, dinf

    for it in range(max_iter + 1):
        rp, re, rd, pobj, dobj, pinf, dinf = measures(y, lam, S, Z)
        comp = sum(float(np.sum(Si * Zi)) for Si, Zi in zip(S, Z))
        mu = comp / max(total_side, 1)
        relgap = abs(pobj - dobj) * obj_scale / (1.0 + obj_scale * (abs(pobj) + abs(dobj)))
        merit = max(pinf, dinf, relgap)
        if merit < best[0]:
            best = (merit, it, y, lam, S, Z)
        elif best[0] < 1e-3 and merit > 1e4 * best[0]:
            # the iterates have left the neighbourhood of the best point
            status = Status.NUMERICAL_FAILURE
            break
        history.append(
            dict(iteration=it, pobj=pobj * obj_scale, dobj=dobj * obj_scale, pinf=pinf, dinf=dinf,
                 complementarity=comp * obj_scale, mu=mu)
        )
        if verbose:
            log.info("it %3d pobj %+.10e dobj %+.10e pinf %.2e dinf %.2e mu %.2e",
                     it, pobj * obj_scale, dobj * obj_scale, pinf, dinf, mu)
        if (
            pinf <= tol and dinf <= tol
            and relgap <= tol
        ) or (total_side == 0 and pinf <= tol and dinf <= tol):
            status = Status.OPTIMAL
            break
        if total_side == 0:
            # pure linear system
            y = np.linalg.lstsq(F, g, rcond=None)[0] if m_eq else np.zeros(n)
            lam = np.linalg.lstsq(F.T, c, rcond=None)[0] if m_eq else np.zeros(0)
            continue
        infeas = _infeasibility(blocks, F, g, c, y, lam, S, Z, tol)
        if infeas is not None:
            status = infeas
            break
        if it == max_iter:
            break

        try:
            scal = [_nt_scaling(Si, Zi) for Si, Zi in zip(S, Z)]
        except np.linalg.LinAlgError:
            status = Status.NUMERICAL_FAILURE
            break
        Ginv = [gi for _, _, gi in scal]
        At = [Gi[None] @ b.A @ Gi.T[None] for b, Gi in zip(blocks, Ginv)]
        rpt = [Gi @ r @ Gi.T for r, Gi in zip(rp, Ginv)]
        try:
            newton = _Newton(blocks, At, n, eq, touched)
        except np.linalg.LinAlgError:
            status = Status.NUMERICAL_FAILURE
            break

        def direction(Rc):
            dy, dlam, dZ = newton.solve([R + r for R, r in zip(Rc, rpt)], rd, re)
            # refine against the residuals of the update actually applied,
            # measured in unscaled coordinates
            for _ in range(3):
                e = rd - F.T @ dlam if m_eq else rd.copy()
                for b, Gi, dz in zip(blocks, Ginv, dZ):
                    b.adj(-(Gi.T @ dz @ Gi), e)
                e2 = re - F @ dy if m_eq else np.zeros(0)
                if np.linalg.norm(e) <= 1e-3 * np.linalg.norm(rd) + 1e-14 and (
                    not m_eq or np.linalg.norm(e2) <= 1e-3 * np.linalg.norm(re) + 1e-14
                ):
                    break
                ddy, ddlam, ddZ = newton.solve([np.zeros_like(R) for R in Rc], e, e2)
                dy, dlam = dy + ddy, dlam + ddlam
                dZ = [a + b for a, b in zip(dZ, ddZ)]
            dS = []
            for b, A_, r in zip(blocks, At, rpt):
                ds = (np.tensordot(dy[b.vars], A_, axes=1) if len(b.vars) else 0.0) - r
                dS.append(0.5 * (ds + ds.T))
            return dy, dlam, dS, dZ

        def steps(dS, dZ):
            ap = ad = math.inf
            for (G, d, _), ds, dz in zip(scal, dS, dZ):
                ap = min(ap, _max_step(d, ds))
                ad = min(ad, _max_step(d, dz))
            return ap, ad

        try:
            # predictor
            Rc = [-np.diag(d) for _, d, _ in scal]
            dy, dlam, dS, dZ = direction(Rc)
            ap, ad = steps(dS, dZ)
            ap, ad = min(1.0, ap), min(1.0, ad)
            comp_aff = sum(
                float(np.sum((np.diag(d) + ap * ds) * (np.diag(d) + ad * dz)))
                for (_, d, _), ds, dz in zip(scal, dS, dZ)
            )
            sigma = min(1.0, max(0.0, comp_aff / max(comp, 1e-300))) ** 3
            # corrector
            Rc = []
            for (_, d, _), ds, dz in zip(scal, dS, dZ):
                prod = ds @ dz
                T = sigma * mu * np.eye(len(d)) - np.diag(d * d) - 0.5 * (prod + prod.T)
                Rc.append(2.0 * T / (d[:, None] + d[None, :]))
            dy, dlam, dS, dZ = direction(Rc)
            ap, ad = steps(dS, dZ)
            ap = min(1.0, step_fraction * ap)
            ad = min(1.0, step_fraction * ad)
        except (np.linalg.LinAlgError, ValueError):
            status = Status.NUMERICAL_FAILURE
            break
        if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(dlam))):
            status = Status.NUMERICAL_FAILURE
            break

        history[-1].update(ap=ap, ad=ad)
        # primal slack updated in unscaled form so that rp contracts exactly;
        # the scaled step bound is rechecked by a factorization and backtracked
        dS_u = [b.op(dy) - r for b, r in zip(blocks, rp)]
        dZ_u = [Gi.T @ dz @ Gi for (_, _, Gi), dz in zip(scal, dZ)]
        newS, ap = _interior_update(S, dS_u, ap)
        newZ, ad = _interior_update(Z, dZ_u, ad)
        if newS is None or newZ is None:
            status = Status.NUMERICAL_FAILURE
            break
        y = y + ap * dy
        lam = lam + ad * dlam
        S, Z = newS, newZ

    if status in (Status.NUMERICAL_FAILURE, Status.MAX_ITERATIONS) and math.isfinite(best[0]):
        # report the best iterate seen rather than the last one
        _, best_it, y, lam, S, Z = best
        history.append(dict(restored_iteration=best_it))

    # undo scaling
    lam_out = np.zeros(p.F.shape[0])
    lam_out[report.kept] = obj_scale * row_scale * lam
    duals = [obj_scale * Zi / s for Zi, s in zip(Z, blk_scale)]
    nb = len(p.blocks)
    bound_duals = {k: float(duals[nb + i][0, 0]) for i, k in enumerate(sorted(clean.lower_bounds))}
    sol = ConicSolution(
        status=status,
        y=y,
        eq_multipliers=lam_out,
        block_duals=duals[:nb],
        primal_objective=float(p.c @ y),
        dual_objective=0.0,
        gap=math.nan,
        iterations=it,
        bound_duals=bound_duals,
        history=history,
        removed_rows=report.removed,
    )
    # solver-side residuals, from the scaled internal state
    re = (g - F @ y) / row_scale if m_eq else np.zeros(0)
    sol.equality_residual = float(np.max(np.abs(re))) if m_eq else 0.0
    sol.block_min_eigenvalues = [
        float(np.linalg.eigvalsh(b.B + b.op(y))[0]) * s for b, s in zip(blocks, blk_scale)
    ]
    sol.complementarity = [
        float(np.sum((b.B + b.op(y)) * Zi)) * obj_scale for b, Zi in zip(blocks, Z)
    ]
    rd = c.copy()
    for b, Zi in zip(blocks, Z):
        b.adj(-Zi, rd)
    if m_eq:
        rd -= F.T @ lam
    sol.dual_infeasibility = float(np.max(np.abs(rd))) * obj_scale if n else 0.0
    dobj = float(g @ lam) - sum(float(np.sum(b.B * Zi)) for b, Zi in zip(blocks, Z))
    sol.dual_objective = dobj * obj_scale
    sol.gap = _relative_gap(sol.primal_objective, sol.dual_objective)
    sol.primal_infeasibility = max(
        [sol.equality_residual] + [max(0.0, -e) for e in sol.block_min_eigenvalues]
    )
    return sol


def _svec_index(side: int):
    iu = np.triu_indices(side)
    w = np.where(iu[0] == iu[1], 1.0, math.sqrt(2.0))
    return iu, w


class _Equalities:
    """Orthogonal factorization of F: null-space basis and least-squares solves."""

    def __init__(self, F: np.ndarray):
        self.F = F
        n = F.shape[1]
        if F.shape[0]:
            Q, R = np.linalg.qr(F.T, mode="complete")
            k = F.shape[0]
            self.Q1, self.R = Q[:, :k], R[:k]
            self.N = Q[:, k:]
        else:
            self.Q1 = np.zeros((n, 0))
            self.R = np.zeros((0, 0))
            self.N = np.eye(n)

    def min_norm(self, rhs: np.ndarray) -> np.ndarray:
        """Minimum-norm x with F x = rhs."""
        if not rhs.size:
            return np.zeros(self.F.shape[1])
        return self.Q1 @ sla.solve_triangular(self.R, rhs, trans="T")

    def multipliers(self, w: np.ndarray) -> np.ndarray:
        """Least-squares lam with F^T lam = w."""
        if not self.R.size:
            return np.zeros(0)
        return sla.solve_triangular(self.R, self.Q1.T @ w)


class _Newton:
    """Newton system in the null space of F, solved by QR of the scaled operator.

    With ``At`` the NT-scaled coefficient matrices, the system
    ``M dy - F^T dlam = At^*(b) - rd``, ``F dy = re`` is reduced to a least
    squares problem in ``dy = dy_p + N dz``; factoring ``svec(At) N`` instead of
    forming ``M`` keeps the conditioning at sqrt(cond(M)).
    """

    def __init__(self, blocks, At, n, eq: _Equalities, touched):
        rows = []
        self.layout = []
        for b, A_ in zip(blocks, At):
            iu, w = _svec_index(b.side)
            mat = np.zeros((len(iu[0]), n))
            if len(b.vars):
                mat[:, b.vars] = (A_[:, iu[0], iu[1]] * w).T
            rows.append(mat)
            self.layout.append((iu, w))
        idle = np.where(~touched)[0]
        if len(idle):
            extra = np.zeros((len(idle), n))
            extra[np.arange(len(idle)), idle] = 1.0
            rows.append(extra)
        self.A = np.vstack(rows) if rows else np.zeros((0, n))
        self.n_idle = len(idle)
        self.eq = eq
        AN = self.A @ eq.N
        if AN.shape[1]:
            self.Q, self.R = np.linalg.qr(AN)
            diag = np.abs(np.diag(self.R))
            if diag.min(initial=np.inf) <= 1e-300 or not np.all(np.isfinite(self.R)):
                raise np.linalg.LinAlgError("scaled operator is rank deficient")
        else:
            self.Q = np.zeros((AN.shape[0], 0))
            self.R = np.zeros((0, 0))

    def _svec(self, mats) -> np.ndarray:
        parts = [M[iu[0], iu[1]] * w for M, (iu, w) in zip(mats, self.layout)]
        if self.n_idle:
            parts.append(np.zeros(self.n_idle))
        return np.concatenate(parts) if parts else np.zeros(0)

    def _smat(self, vec) -> list[np.ndarray]:
        out, k = [], 0
        for iu, w in self.layout:
            side = int(iu[0].max()) + 1 if len(iu[0]) else 0
            cnt = len(iu[0])
            M = np.zeros((side, side))
            M[iu[0], iu[1]] = vec[k : k + cnt] / w
            out.append(M + np.triu(M, 1).T)
            k += cnt
        return out

    def solve(self, rhs_mats, rd, re):
        """Return ``dy, dlam, dZ`` (dZ in scaled coordinates, one matrix per block).

        The dual step ``W = b - At dy`` is formed from the orthogonal factors
        rather than from ``dy``: ``W = (I - QQ^T) u + Q t`` with
        ``R^T t = N^T rd``, so ``At^* W`` reproduces ``rd`` (modulo range F^T)
        without the squared conditioning that ``dy`` itself carries.
        """
        b = self._svec(rhs_mats)
        dyp = self.eq.min_norm(re)
        u = b - self.A @ dyp
        if self.R.size:
            Qu = self.Q.T @ u
            t = sla.solve_triangular(self.R, self.eq.N.T @ rd, trans="T")
            z = sla.solve_triangular(self.R, Qu - t)
            dy = dyp + self.eq.N @ z
            W = u - self.Q @ Qu + self.Q @ t
        else:
            dy, W = dyp, u
        # F^T dlam = rd - At^* W
        dlam = self.eq.multipliers(rd - self.A.T @ W)
        return dy, dlam, self._smat(W)


def _infeasibility(blocks, F, g, c, y, lam, S, Z, tol):
    """Crude certificate checks on the current iterate's rays."""
    # primal infeasibility: large dual ray with A^*Z + F^T lam ~ 0 and positive dual value
    zn = sum(np.linalg.norm(Zi) for Zi in Z) + np.linalg.norm(lam)
    if zn > 1e10:
        val = float(g @ lam) - sum(float(np.sum(b.B * Zi)) for b, Zi in zip(blocks, Z))
        ray = np.zeros_like(c)
        for b, Zi in zip(blocks, Z):
            b.adj(Zi, ray)
        ray += F.T @ lam
        if val > 0 and np.linalg.norm(ray) / val < 1e-6:
            return Status.PRIMAL_INFEASIBLE
    yn = np.linalg.norm(y)
    if yn > 1e10:
        cy = float(c @ y)
        if cy < 0:
            ok_eq = (np.linalg.norm(F @ y) / -cy < 1e-6) if F.shape[0] else True
            ok_psd = all(np.linalg.eigvalsh(b.op(y))[0] / -cy > -1e-6 for b in blocks)
            if ok_eq and ok_psd:
                return Status.DUAL_INFEASIBLE
    return None


def _failure(p: ConicProgram, status: Status, iterations: int, removed) -> ConicSolution:
    blocks = p.blocks
    return ConicSolution(
        status=status,
        y=np.zeros(p.nvar),
        eq_multipliers=np.zeros(p.F.shape[0]),
        block_duals=[np.zeros((b.side, b.side)) for b in blocks],
        primal_objective=math.nan,
        dual_objective=math.nan,
        gap=math.nan,
        iterations=iterations,
        removed_rows=list(removed),
    )


def write_sdpa(p: ConicProgram, path) -> None:
    """Write the program in SDPA sparse format (``.dat-s``).

    SDPA solves ``min c^T x  s.t.  sum_i F_i x_i - F_0 >= 0``; here
    ``F_0 = -B_j`` per block and each equality row becomes a pair of diagonal
    (LP) entries ``F y - g >= 0`` and ``g - F y >= 0`` in a trailing LP block.
    """
    blocks = p.all_blocks()
    neq = p.F.shape[0]
    struct = [b.side for b in blocks] + ([-2 * neq] if neq else [])
    lines = [
        '"pwamc conic program"',
        str(p.nvar),
        str(len(struct)),
        " ".join(str(s) for s in struct),
        " ".join(_num(v) for v in p.c),
    ]

    def emit(mat_no, blk_no, M):
        for i in range(M.shape[0]):
            for j in range(i, M.shape[1]):
                if M[i, j] != 0.0:
                    lines.append(f"{mat_no} {blk_no} {i + 1} {j + 1} {_num(M[i, j])}")

    for bj, blk in enumerate(blocks, start=1):
        emit(0, bj, -blk.const)
    if neq:
        lp = len(blocks) + 1
        for r in range(neq):
            if p.g[r] != 0.0:
                lines.append(f"0 {lp} {2 * r + 1} {2 * r + 1} {_num(p.g[r])}")
                lines.append(f"0 {lp} {2 * r + 2} {2 * r + 2} {_num(-p.g[r])}")
    for a in range(p.nvar):
        for bj, blk in enumerate(blocks, start=1):
            if a in blk.coefs:
                emit(a + 1, bj, blk.coefs[a])
        if neq:
            lp = len(blocks) + 1
            for r in range(neq):
                if p.F[r, a] != 0.0:
                    lines.append(f"{a + 1} {lp} {2 * r + 1} {2 * r + 1} {_num(p.F[r, a])}")
                    lines.append(f"{a + 1} {lp} {2 * r + 2} {2 * r + 2} {_num(-p.F[r, a])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _num(v: float) -> str:
    return repr(float(v))
