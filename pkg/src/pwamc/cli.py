"""Command-line entry point: ``pwamc solve | synthesize | benchmark``.

Exit codes: 0 success, 1 usage or parse error, 2 solver failure, 3 synthesis failure.
Reports are deterministic; timings and host details go to ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from pwamc import __version__
from pwamc import bench
from pwamc.policy import PolicyConfig, RunStatus, run_policy, run_summary, trajectory_csv
from pwamc.polynomial import Polynomial
from pwamc.problem import ProblemError, PwaOcp, builtin_example, parse_problem, render_problem
from pwamc.relaxation import OrderResult, RelaxationError, minimum_order, solve_order
from pwamc.sdp import Status, write_sdpa

log = logging.getLogger("pwamc")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_SYNTHESIS = 0, 1, 2, 3
VALUE_FORMAT = "pwamc-value/1"


class UsageError(Exception):
    pass


# -- files --------------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


@dataclasses.dataclass
class RunManifest:
    command: str
    options: dict
    input_digest: str
    tool_version: str = __version__
    timings: dict = dataclasses.field(default_factory=dict)
    artifacts: list = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["host"] = {"python": platform.python_version(), "machine": platform.machine()}
        return d


def threads() -> int:
    raw = os.environ.get("PWAMC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"PWAMC_THREADS must be an integer, got {raw!r}")


# -- problem and value-function loading ---------------------------------------


def load_problem(args) -> tuple[PwaOcp, str]:
    """The problem and the sha256 digest of its canonical or on-disk text."""
    if args.builtin_example:
        ocp = builtin_example()
        text = render_problem(ocp)
    else:
        path = Path(args.problem)
        if not path.is_file():
            raise UsageError(f"problem file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            ocp = parse_problem(text)
        except (ProblemError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}")
    if getattr(args, "mass_bound", None) is not None:
        try:
            ocp = dataclasses.replace(ocp, mass_bound=args.mass_bound)
        except ProblemError as exc:
            raise UsageError(str(exc))
    return ocp, hashlib.sha256(text.encode("utf-8")).hexdigest()


def value_document(res: OrderResult, ocp: PwaOcp, digest: str) -> dict:
    v = res.value.v
    return {
        "format": VALUE_FORMAT,
        "n": ocp.n,
        "state_names": ocp.state_names,
        "order": res.order,
        "lower_bound": res.value.lower_bound,
        "input_digest": digest,
        "polynomial": v.to_string(ocp.state_names),
        "terms": [[list(mono), coef] for mono, coef in v.items()],
        "manifest": "manifest.json",
    }


def load_value(path: Path, ocp: PwaOcp) -> Polynomial:
    if not path.is_file():
        raise UsageError(f"value-function file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})")
    if doc.get("format") != VALUE_FORMAT:
        raise UsageError(f"{path}: expected format {VALUE_FORMAT!r}")
    if doc.get("n") != ocp.n:
        raise UsageError(f"{path}: value function has n = {doc.get('n')}, problem has n = {ocp.n}")
    terms = {}
    for mono, coef in doc["terms"]:
        if len(mono) != ocp.n:
            raise UsageError(f"{path}: exponent {mono} does not match n = {ocp.n}")
        terms[tuple(int(e) for e in mono)] = float(coef)
    return Polynomial(ocp.n, terms)


# -- solve --------------------------------------------------------------------


def order_payload(res: OrderResult) -> dict:
    out = {"order": res.order, "status": res.status.value, "error": res.error}
    if res.solution is not None:
        sol = res.solution
        out.update(
            iterations=sol.iterations,
            primal_objective=sol.primal_objective,
            dual_objective=sol.dual_objective,
            gap=sol.gap,
            primal_infeasibility=sol.primal_infeasibility,
            dual_infeasibility=sol.dual_infeasibility,
        )
    if res.value is not None:
        out["lower_bound"] = res.value.lower_bound
        out["value_file"] = f"value_d{res.order}.json"
    if res.certificate is not None:
        c = res.certificate
        out["certificate"] = {
            "cell_residuals": c.cell_residuals,
            "cell_scales": c.cell_scales,
            "terminal_residual": c.terminal_residual,
            "putinar_ok": c.putinar_ok(),
            "hjb_min": c.hjb_min,
            "hjb_argmin": c.hjb_argmin,
            "terminal_min": c.terminal_min,
            "mass_multiplier": c.mass_multiplier,
        }
    return out


def parse_orders(args, ocp: PwaOcp) -> list[int]:
    lo = minimum_order(ocp)
    if args.orders:
        try:
            orders = sorted({int(s) for s in args.orders.split(",") if s.strip()})
        except ValueError:
            raise UsageError(f"--orders must be a comma-separated list of integers, got {args.orders!r}")
    else:
        orders = list(range(lo, args.dmax + 1))
    if not orders or orders[0] < lo:
        raise UsageError(f"relaxation orders must be >= {lo} for this problem")
    return orders


def run_hierarchy(ocp: PwaOcp, orders: list[int], scaling: bool) -> list[OrderResult]:
    def one(d):
        log.info("solving order %d", d)
        try:
            return solve_order(ocp, d, scaling=scaling)
        except (RelaxationError, np.linalg.LinAlgError) as exc:
            return OrderResult(d, Status.NUMERICAL_FAILURE, None, None, None, None, error=str(exc))

    with ThreadPoolExecutor(max_workers=min(threads(), len(orders))) as pool:
        return list(pool.map(one, orders))


def cmd_solve(args) -> int:
    ocp, digest = load_problem(args)
    if args.dmax is not None and args.dmax < 1:
        raise UsageError(f"--dmax must be >= 1, got {args.dmax}")
    orders = parse_orders(args, ocp)
    out = Path(args.out)
    t0 = time.perf_counter()
    results = run_hierarchy(ocp, orders, scaling=not args.no_scaling)
    manifest = RunManifest("solve", vars_clean(args), digest)
    for res in results:
        manifest.timings[f"order_{res.order}"] = res.timings
        if res.value is not None:
            name = f"value_d{res.order}.json"
            write_atomic(out / name, dump_json(value_document(res, ocp, digest)))
            manifest.artifacts.append(name)
        if args.dump_sdpa and res.relaxation is not None:
            name = f"relaxation_d{res.order}.dat-s"
            out.mkdir(parents=True, exist_ok=True)
            write_sdpa(res.relaxation.program, out / name)
            manifest.artifacts.append(name)
    bounds = [r.lower_bound for r in results if r.value is not None]
    report = {
        "command": "solve",
        "input_digest": digest,
        "manifest": "manifest.json",
        "scaling": not args.no_scaling,
        "mass_bound": ocp.mass_bound,
        "orders": [order_payload(r) for r in results],
        "monotone": all(b2 >= b1 - 1e-6 for b1, b2 in zip(bounds, bounds[1:])),
    }
    write_atomic(out / "solve_report.json", dump_json(report))
    manifest.artifacts.append("solve_report.json")
    manifest.timings["total"] = time.perf_counter() - t0
    write_atomic(out / "manifest.json", dump_json(manifest.to_dict()))
    failed = [r.order for r in results if r.status is not Status.OPTIMAL]
    for r in results:
        log.info("order %d: %s bound %s", r.order, r.status.value, r.lower_bound)
    if failed:
        print(f"solver failure at orders {failed}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


# -- synthesize ---------------------------------------------------------------


def policy_config(args) -> PolicyConfig:
    try:
        return PolicyConfig(diameter=args.diameter, epsilon=args.epsilon, max_steps=args.max_steps)
    except ValueError as exc:
        raise UsageError(str(exc))


def initial_state(args, ocp: PwaOcp):
    if args.x0 is None:
        return None
    try:
        x0 = np.array([float(s) for s in args.x0.split(",")])
    except ValueError:
        raise UsageError(f"--x0 must be comma-separated numbers, got {args.x0!r}")
    if x0.size != ocp.n:
        raise UsageError(f"--x0 has {x0.size} entries, problem has n = {ocp.n}")
    return x0


def cmd_synthesize(args) -> int:
    ocp, digest = load_problem(args)
    v = load_value(Path(args.value), ocp)
    cfg = policy_config(args)
    x0 = initial_state(args, ocp)
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        run = run_policy(ocp, v, cfg=cfg, x0=x0)
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = RunManifest("synthesize", vars_clean(args), digest)
    manifest.timings["policy"] = time.perf_counter() - t0
    summary = run_summary(run)
    summary["manifest"] = "manifest.json"
    summary["input_digest"] = digest
    write_atomic(out / "trajectory.csv", trajectory_csv(run, ocp))
    write_atomic(out / "summary.json", dump_json(summary))
    manifest.artifacts += ["trajectory.csv", "summary.json"]
    write_atomic(out / "manifest.json", dump_json(manifest.to_dict()))
    log.info("%s after %d steps, J = %.10g", run.status.value, run.steps, run.cost)
    if run.status is not RunStatus.REACHED_TARGET:
        print(f"synthesis ended with {run.status.value}: {run.message}", file=sys.stderr)
        return EXIT_SYNTHESIS
    return EXIT_OK


# -- benchmark ----------------------------------------------------------------


def parse_diameters(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sweep must be comma-separated numbers, got {text!r}")
    if not vals or any(not v > 0 for v in vals):
        raise UsageError("--sweep diameters must be positive")
    return vals


def cmd_benchmark(args) -> int:
    args.builtin_example, args.problem = True, None
    ocp, digest = load_problem(args)
    orders = parse_orders(args, ocp)
    cfg = policy_config(args)
    sweep = parse_diameters(args.sweep) if args.sweep else []
    out = Path(args.out)
    manifest = RunManifest("benchmark", vars_clean(args), digest)
    t0 = time.perf_counter()
    results = run_hierarchy(ocp, orders, scaling=not args.no_scaling)
    manifest.timings["hierarchy"] = time.perf_counter() - t0
    solved = [r for r in results if r.value is not None]
    if not solved:
        print("no relaxation order was solved", file=sys.stderr)
        return EXIT_SOLVER
    top = solved[-1]
    t1 = time.perf_counter()
    run = run_policy(ocp, top.value.v, cfg=cfg)
    manifest.timings["policy"] = time.perf_counter() - t1
    report = bench.compare(results, run)

    def sweep_one(d):
        r = run_policy(ocp, top.value.v, cfg=dataclasses.replace(cfg, diameter=d, event_tol=None))
        return {"diameter": d, "status": r.status.value, "J": r.cost, "abs_cost_gap": abs(r.cost - report.oracle_cost)}

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        sweep_rows = list(pool.map(sweep_one, sweep))
    gaps = [row["abs_cost_gap"] for row in sweep_rows]
    rel_bound_gap = report.bound_gap / report.oracle_cost
    checks = {
        "bounds_monotone": all(
            b2 >= b1 - 1e-6 for b1, b2 in zip([r.lower_bound for r in solved], [r.lower_bound for r in solved][1:])
        ),
        "bounds_below_oracle": all(r.lower_bound <= report.oracle_cost + 1e-4 for r in solved),
        "bound_gap_within_5pct": rel_bound_gap <= 0.05,
        "policy_reached_target": run.status is RunStatus.REACHED_TARGET,
        "cost_within_10pct": abs(report.cost_gap) <= 0.1 * report.oracle_cost,
        "feedback_dev_le_0.1": report.feedback_sup_dev <= 0.1,
        "sweep_nonincreasing": all(g2 <= g1 + 1e-3 for g1, g2 in zip(gaps, gaps[1:])),
    }
    doc = report.to_dict()
    doc.update(
        command="benchmark",
        input_digest=digest,
        manifest="manifest.json",
        orders=[order_payload(r) for r in results],
        sweep=sweep_rows,
        checks=checks,
        policy={k: val for k, val in run_summary(run).items() if k != "config"},
    )
    write_atomic(out / "comparison.json", dump_json(doc))
    write_atomic(out / "value_curves.csv", rows_csv(*bench.value_curves(solved, ocp)))
    write_atomic(out / "feedback_curves.csv", rows_csv(*bench.feedback_curves(run)))
    write_atomic(out / "trajectory.csv", trajectory_csv(run, ocp))
    for r in solved:
        write_atomic(out / f"value_d{r.order}.json", dump_json(value_document(r, ocp, digest)))
    manifest.artifacts += ["comparison.json", "value_curves.csv", "feedback_curves.csv", "trajectory.csv"]
    manifest.artifacts += [f"value_d{r.order}.json" for r in solved]
    manifest.timings["total"] = time.perf_counter() - t0
    write_atomic(out / "manifest.json", dump_json(manifest.to_dict()))
    for name, ok in checks.items():
        log.info("%-24s %s", name, "ok" if ok else "NOT MET")
    if any(r.status is not Status.OPTIMAL for r in results):
        return EXIT_SOLVER
    if run.status is not RunStatus.REACHED_TARGET:
        return EXIT_SYNTHESIS
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def vars_clean(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwamc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pwamc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def problem_args(p):
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--problem", metavar="PATH", help="problem description (JSON)")
        g.add_argument("--builtin-example", action="store_true", help="the two-cell scalar example")
        p.add_argument("--mass-bound", type=float, default=None, help="override the mass bound")

    def order_args(p, dmax_default):
        p.add_argument("--dmax", type=int, default=dmax_default, help="highest relaxation order")
        p.add_argument("--orders", default=None, help="comma-separated orders (overrides --dmax)")
        p.add_argument("--no-scaling", action="store_true", help="solve in original coordinates")

    def policy_args(p):
        p.add_argument("--diameter", type=float, default=0.01, help="partition diameter (seconds)")
        p.add_argument("--epsilon", type=float, default=0.01, help="target tolerance")
        p.add_argument("--max-steps", type=int, default=100_000)

    p = sub.add_parser("solve", help="solve the relaxation hierarchy")
    problem_args(p)
    order_args(p, 6)
    p.add_argument("--dump-sdpa", action="store_true", help="also write each relaxation in SDPA format")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synthesize", help="run the sample-and-hold feedback")
    problem_args(p)
    p.add_argument("--value", required=True, metavar="PATH", help="value-function file written by solve")
    policy_args(p)
    p.add_argument("--x0", default=None, help="initial state, comma-separated")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("benchmark", help="full pipeline on the built-in example with oracle comparison")
    order_args(p, 6)
    policy_args(p)
    p.add_argument("--mass-bound", type=float, default=None)
    p.add_argument("--sweep", default="0.1,0.05,0.025,0.0125", help="diameters for the refinement sweep")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
