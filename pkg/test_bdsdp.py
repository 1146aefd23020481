import csv
import json

import numpy as np
import pytest

from bdsdp import BENCH_HEADER, EXIT_BAD_INPUT, EXIT_NOT_CERTIFIED, EXIT_OK, build_instance, main
from fileops import load_report, read_factor, read_problem, truth_path, write_factor
from manifold.stiefel_product import StiefelPoint

TEST_SEED = 1337
MAXCUT_2X2 = "bdsdp 1\n2 1\nlinear\n1 2 -1.0\n"


@pytest.fixture
def maxcut_file(tmp_path):
    path = tmp_path / "maxcut.bdsdp"
    path.write_text(MAXCUT_2X2)
    return str(path)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


#==================================================================#
#  solve
#==================================================================#
def test_solve_two_node_maxcut(maxcut_file, tmp_path):
    report = str(tmp_path / "report.json")
    trace = str(tmp_path / "trace.csv")
    assert main(["solve", maxcut_file, "--report", report, "--trace", trace]) == EXIT_OK
    data = load_report(report)
    assert data["kkt"] and data["status"] == "certified"
    assert data["cost"] == pytest.approx(-2.0, abs=1e-8)
    assert data["environment"]["problem"] == maxcut_file
    assert len(read_csv(trace)) > 0


def test_lower_triangle_entry_is_rejected(tmp_path):
    path = tmp_path / "lower.bdsdp"
    path.write_text("bdsdp 1\n2 1\nlinear\n2 1 -1.0\n")
    assert main(["solve", str(path)]) == EXIT_BAD_INPUT


def test_pmax_below_d_plus_one(maxcut_file):
    assert main(["solve", maxcut_file, "--pmax", "1"]) == EXIT_BAD_INPUT


def test_p1_below_d_plus_one(maxcut_file):
    assert main(["solve", maxcut_file, "--p1", "1"]) == EXIT_BAD_INPUT


def test_eps_schedule_needs_measurements(maxcut_file):
    assert main(["solve", maxcut_file, "--eps-schedule", "1,0.1"]) == EXIT_BAD_INPUT


def test_unknown_flag_is_a_usage_error(maxcut_file):
    assert main(["solve", maxcut_file, "--no-such-flag"]) == EXIT_BAD_INPUT


def test_missing_problem_file(tmp_path):
    assert main(["solve", str(tmp_path / "missing.bdsdp")]) == EXIT_BAD_INPUT


def test_customsettings_fill_defaults(maxcut_file, tmp_path):
    settings = tmp_path / "settings.json"
    settings.write_text(json.dumps({"pmax": 1, "seed": None}))
    assert main(["--customsettings", str(settings), "solve", maxcut_file]) == EXIT_BAD_INPUT
    # An explicit flag wins over the preset
    assert main(["--customsettings", str(settings), "solve", maxcut_file, "--pmax", "2"]) == EXIT_OK


def test_arguments_from_the_environment(maxcut_file, tmp_path, monkeypatch):
    settings = tmp_path / "settings.json"
    settings.write_text(json.dumps({"pmax": 1}))
    monkeypatch.setenv("BDSDP_ARGS", f"--customsettings {settings}")
    assert main(["solve", maxcut_file]) == EXIT_BAD_INPUT


#==================================================================#
#  certify
#==================================================================#
def test_certify_staircase_output(maxcut_file, tmp_path):
    factor = str(tmp_path / "factor.txt")
    assert main(["solve", maxcut_file, "--factor", factor]) == EXIT_OK
    assert main(["certify", maxcut_file, factor]) == EXIT_OK


def test_certify_critical_saddle(maxcut_file, tmp_path):
    factor = str(tmp_path / "saddle.txt")
    write_factor(factor, StiefelPoint.from_array(np.array([[1.0], [-1.0]]), 1))
    assert main(["certify", maxcut_file, factor]) == EXIT_NOT_CERTIFIED


def test_certify_rejects_infeasible_factor(maxcut_file, tmp_path):
    factor = str(tmp_path / "factor.txt")
    assert main(["solve", maxcut_file, "--factor", factor]) == EXIT_OK
    Y = read_factor(factor)
    perturbed = Y.Y.copy()
    perturbed[0] *= 1.01
    write_factor(factor, StiefelPoint.from_array(perturbed, 1))
    assert main(["certify", maxcut_file, factor]) == EXIT_BAD_INPUT


def test_certify_checks_dimensions(maxcut_file, tmp_path):
    factor = str(tmp_path / "factor.txt")
    write_factor(factor, StiefelPoint.from_array(np.ones((3, 1)), 1))
    assert main(["certify", maxcut_file, factor]) == EXIT_BAD_INPUT


#==================================================================#
#  synth
#==================================================================#
def test_synth_is_reproducible(tmp_path):
    paths = [str(tmp_path / name) for name in ("a.bdsdp", "b.bdsdp")]
    for path in paths:
        args = ["synth", "rotsync", "--m", "5", "--d", "2", "--sigma", "0.1", "--seed", "3", "-o", path]
        assert main(args) == EXIT_OK
    a, b = paths
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(truth_path(a), "rb").read() == open(truth_path(b), "rb").read()


def test_synth_then_solve_reports_recovery(tmp_path):
    problem = str(tmp_path / "sync.bdsdp")
    report = str(tmp_path / "report.json")
    assert main(["synth", "rotsync", "--m", "6", "--d", "2", "--sigma", "0", "--seed", "5", "-o", problem]) == EXIT_OK
    assert main(["solve", problem, "--grad-tol", "1e-10", "--report", report]) == EXIT_OK
    data = load_report(report)
    assert data["metrics"]["block_mse"] <= 1e-8
    assert data["cost"] == pytest.approx(-1.0, abs=1e-8)


def test_synth_measurement_costs(tmp_path):
    problem = str(tmp_path / "perm.bdsdp")
    args = ["synth", "permsync", "--m", "5", "--d", "3", "--fraction", "0.2", "--seed", "2", "-o", problem]
    assert main(args) == EXIT_OK
    parsed = read_problem(problem)
    assert parsed.kind == "pseudo-huber" and parsed.eps == 1.0


def test_synth_rejects_bad_parameters(tmp_path):
    args = ["synth", "permsync", "--fraction", "1.5", "-o", str(tmp_path / "bad.bdsdp")]
    assert main(args) == EXIT_BAD_INPUT


def test_maxcut_truth_is_the_best_cut():
    made = build_instance("maxcut", {"m": 0, "d": 1, "n": 6, "edge_prob": 0.6}, TEST_SEED)
    assert made.problem.spec.n == 6
    assert made.truth.p == 1
    assert np.array_equal(np.abs(made.truth.Y), np.ones((6, 1)))


#==================================================================#
#  bench and cycle
#==================================================================#
def bench_args(output, jobs):
    return [
        "bench", "rotsync", "--d", "2", "--sigma", "0", "--sweep", "m=4,6",
        "--trials", "2", "--jobs", str(jobs), "--seed", "9", "-o", output,
    ]


def test_bench_rows(tmp_path):
    output = str(tmp_path / "bench.csv")
    assert main(bench_args(output, 1)) == EXIT_OK
    rows = read_csv(output)
    assert list(rows[0]) == BENCH_HEADER
    assert [row["m"] for row in rows] == ["4", "4", "6", "6"]
    assert all(row["kkt"] == "True" and not row["error"] for row in rows)
    assert all(float(row["eig_block_mse"]) <= 1e-10 for row in rows)
    assert len({row["seed"] for row in rows}) == 4


def test_bench_is_deterministic_across_jobs(tmp_path):
    serial, parallel = str(tmp_path / "serial.csv"), str(tmp_path / "parallel.csv")
    assert main(bench_args(serial, 1)) == EXIT_OK
    assert main(bench_args(parallel, 2)) == EXIT_OK
    strip = lambda rows: [{k: v for k, v in row.items() if k != "wall_time"} for row in rows]  # noqa: E731
    assert strip(read_csv(serial)) == strip(read_csv(parallel))


def test_bench_rejects_unknown_sweep(tmp_path):
    args = ["bench", "maxcut", "--sweep", "sigma=0.1", "-o", str(tmp_path / "bench.csv")]
    assert main(args) == EXIT_BAD_INPUT


def test_cycle_closed_form_check():
    assert main(["cycle", "--m", "5", "--d", "2", "--seed", str(TEST_SEED + 5)]) == EXIT_OK
