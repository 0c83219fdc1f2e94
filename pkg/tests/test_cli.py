import csv
import json

import pytest

from pwamc.cli import EXIT_OK, EXIT_SYNTHESIS, EXIT_USAGE, main
from pwamc.problem import builtin_example, render_problem


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    assert main(["solve", "--builtin-example", "--dmax", "3", "--out", str(out)]) == EXIT_OK
    return out


def test_solve_outputs(solved):
    report = json.loads((solved / "solve_report.json").read_text())
    assert [o["order"] for o in report["orders"]] == [1, 2, 3]
    assert report["monotone"] is True
    bounds = [o["lower_bound"] for o in report["orders"]]
    assert bounds == sorted(bounds)
    for d in (1, 2, 3):
        doc = json.loads((solved / f"value_d{d}.json").read_text())
        assert doc["format"] == "pwamc-value/1" and doc["n"] == 1 and doc["order"] == d
    manifest = json.loads((solved / "manifest.json").read_text())
    assert "solve_report.json" in manifest["artifacts"]


def test_solve_is_deterministic(solved, tmp_path, monkeypatch):
    monkeypatch.setenv("PWAMC_THREADS", "3")
    assert main(["solve", "--builtin-example", "--dmax", "3", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("solve_report.json", "value_d3.json"):
        assert (tmp_path / name).read_bytes() == (solved / name).read_bytes()


def test_problem_file_matches_builtin(solved, tmp_path):
    spec = tmp_path / "problem.json"
    spec.write_text(render_problem(builtin_example()))
    out = tmp_path / "out"
    assert main(["solve", "--problem", str(spec), "--orders", "2", "--dump-sdpa", "--out", str(out)]) == EXIT_OK
    ours = json.loads((out / "solve_report.json").read_text())["orders"]
    ref = json.loads((solved / "solve_report.json").read_text())["orders"]
    assert [o["order"] for o in ours] == [2]
    assert ours[0]["lower_bound"] == pytest.approx(ref[1]["lower_bound"], rel=1e-9)
    assert (out / "relaxation_d2.dat-s").read_text().strip()


def test_synthesize_round_trip(solved, tmp_path):
    rc = main(["synthesize", "--builtin-example", "--value", str(solved / "value_d3.json"), "--out", str(tmp_path)])
    assert rc == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "ReachedTarget"
    assert abs(summary["final_state"][0] - 1.0) <= 0.01
    with open(tmp_path / "trajectory.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["x1"]) == -1.0
    assert sum(int(r["partition"]) for r in rows) == summary["steps"]


def test_synthesize_max_steps_fails(solved, tmp_path):
    argv = ["synthesize", "--builtin-example", "--value", str(solved / "value_d3.json"),
            "--diameter", "1e-9", "--max-steps", "5", "--out", str(tmp_path)]
    assert main(argv) == EXIT_SYNTHESIS
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "MaxSteps"


def test_usage_errors(solved, tmp_path):
    assert main(["solve", "--problem", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["solve", "--builtin-example", "--dmax", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["solve"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    doc = json.loads((solved / "value_d1.json").read_text())
    doc["n"] = 2
    bad = tmp_path / "v2.json"
    bad.write_text(json.dumps(doc))
    assert main(["synthesize", "--builtin-example", "--value", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    rc = main(["synthesize", "--builtin-example", "--value", str(solved / "value_d1.json"),
               "--x0", "0.1,0.2", "--out", str(tmp_path)])
    assert rc == EXIT_USAGE


def test_benchmark_outputs(tmp_path):
    assert main(["benchmark", "--sweep", "0.1,0.05", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "comparison.json").read_text())
    assert all(doc["checks"].values())
    for name in ("value_curves.csv", "feedback_curves.csv", "trajectory.csv", "value_d6.json"):
        assert (tmp_path / name).exists()
    assert main(["benchmark", "--sweep", "0.1,-1", "--out", str(tmp_path)]) == EXIT_USAGE
