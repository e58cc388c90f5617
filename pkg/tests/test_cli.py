"""Console entry point: config handling, artifacts, exit codes, rerun
stability.  Commands run as subprocesses so exit codes, streams, and file
side effects are observed exactly as a shell user sees them."""

import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from ccopf.cli import CliError, _exit_code_for, _parse_k_values, _read_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def run_cli(args, cwd, env_extra=None):
    import os

    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "ccopf.cli", *[str(a) for a in args]],
        cwd=cwd, capture_output=True, text=True, timeout=600, env=env)


def read_table(path):
    """CSV rows as dicts, skipping # comment lines."""
    lines = [ln for ln in Path(path).read_text().splitlines()
             if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


@pytest.fixture(scope="module")
def tutorial_run(tmp_path_factory):
    """One verbatim run of the walkthrough config in a fresh directory."""
    workdir = tmp_path_factory.mktemp("tutorial")
    result = run_cli(["solve", "dc", "--config",
                      CONFIG_DIR / "tutorial.ini"], cwd=workdir)
    assert result.returncode == 0, result.stderr
    return workdir, result


class TestCaseInfo:
    def test_counts_for_bundled_case(self, tmp_path):
        result = run_cli(["case", "info", "--case", "pkg:case14"],
                         cwd=tmp_path)
        assert result.returncode == 0
        info = dict(line.split(": ") for line in
                    result.stdout.strip().splitlines())
        assert info["buses"] == "14"
        assert info["generators"] == "5"
        assert info["branches"] == "20"
        assert float(info["total_load_mw"]) == pytest.approx(259.0)

    def test_bundled_large_case(self, tmp_path):
        result = run_cli(["case", "info", "--case", "pkg:case300s"],
                         cwd=tmp_path)
        assert result.returncode == 0
        info = dict(line.split(": ") for line in
                    result.stdout.strip().splitlines())
        assert info["buses"] == "300"

    def test_missing_case_file_names_path(self, tmp_path):
        result = run_cli(["case", "info", "--case", "/no/such/grid.m"],
                         cwd=tmp_path)
        assert result.returncode == 1
        assert "/no/such/grid.m" in result.stderr

    def test_unknown_bundled_case(self, tmp_path):
        result = run_cli(["case", "info", "--case", "pkg:case9999"],
                         cwd=tmp_path)
        assert result.returncode == 1
        assert "case9999" in result.stderr


class TestScenario:
    def test_gen_repeats_byte_identical(self, tmp_path):
        args = ["scenario", "gen", "--config", CONFIG_DIR / "tutorial.ini",
                "--s", 30, "--seed", 7]
        assert run_cli(args, cwd=tmp_path).returncode == 0
        path = tmp_path / "out" / "scenarios_s30_seed7.csv"
        first = path.read_bytes()
        assert run_cli(args, cwd=tmp_path).returncode == 0
        assert path.read_bytes() == first
        header = first.decode().splitlines()
        assert header[0].startswith("# seed=7 ")
        assert header[1] == "bus2,bus3"
        assert len(header) == 2 + 30

    def test_stats_reports_shape(self, tmp_path):
        run_cli(["scenario", "gen", "--config", CONFIG_DIR / "tutorial.ini",
                 "--s", 25, "--seed", 3], cwd=tmp_path)
        result = run_cli(
            ["scenario", "stats", "out/scenarios_s25_seed3.csv"],
            cwd=tmp_path)
        assert result.returncode == 0
        assert "s: 25" in result.stdout
        assert "n_vre: 2" in result.stdout

    def test_gen_from_explicit_spec(self, tmp_path):
        result = run_cli(
            ["scenario", "gen", "--s", 10, "--seed", 1,
             "--forecasts", 0.2, 0.2, "--zeta", 0.05, "--rho", 0.2],
            cwd=tmp_path)
        assert result.returncode == 0
        assert (tmp_path / "out" / "scenarios_s10_seed1.csv").is_file()

    def test_gen_without_spec_rejected(self, tmp_path):
        result = run_cli(["scenario", "gen", "--s", 10, "--seed", 1],
                         cwd=tmp_path)
        assert result.returncode == 1


class TestAmbiguity:
    def test_eps_prints_decimal(self, tmp_path):
        result = run_cli(["ambiguity", "eps", "--k", 97, "--s", 100],
                         cwd=tmp_path)
        assert result.returncode == 0
        assert result.stdout.strip().startswith("0.109")

    def test_eps_range_emits_csv(self, tmp_path):
        result = run_cli(
            ["ambiguity", "eps", "--k-range", "96:100:2", "--s", 100],
            cwd=tmp_path)
        assert result.returncode == 0
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "k,epsilon_star,bound"
        eps = [float(line.split(",")[1]) for line in lines[1:]]
        assert len(eps) == 3
        assert eps == sorted(eps, reverse=True)

    def test_mink_matches_known_value(self, tmp_path):
        result = run_cli(
            ["ambiguity", "mink", "--target", 0.10, "--s", 100],
            cwd=tmp_path)
        assert result.returncode == 0
        assert result.stdout.strip() == "98"

    def test_mink_unreachable_target(self, tmp_path):
        result = run_cli(
            ["ambiguity", "mink", "--target", 0.001, "--s", 10],
            cwd=tmp_path)
        assert result.returncode == 1

    def test_k_for_radius(self, tmp_path):
        result = run_cli(
            ["ambiguity", "k", "--eps", 0.2, "--radius", 0.01, "--s", 100],
            cwd=tmp_path)
        assert result.returncode == 0
        assert result.stdout.strip().isdigit()


class TestSolveDc:
    def test_tutorial_run_end_to_end(self, tutorial_run):
        workdir, result = tutorial_run
        assert "k = 98 chosen" in result.stdout
        log_text = (workdir / "out" / "tutorial.log").read_text()
        assert "k = 98 chosen" in log_text

        solution = workdir / "out" / "tutorial_solution.csv"
        assert solution.read_text().startswith("# config=")
        rows = read_table(solution)
        assert len(rows) == 5
        mw = [float(r["p_mw"]) for r in rows]
        # the free machine carries the bulk; the others stay small but on
        assert mw[0] > 150.0
        assert all(0.0 <= v < 15.0 for v in mw[1:])

        report = read_table(workdir / "out" / "tutorial_report.csv")
        scalars = {r["metric"]: r["value"] for r in report if not r["name"]}
        assert float(scalars["joint_violation_rate"]) <= 0.0924
        assert float(scalars["cost_vs_ro"]) <= 1.0 + 1e-9

    def test_rerun_is_byte_identical(self, tutorial_run):
        workdir, _ = tutorial_run
        outputs = ["tutorial_solution.csv", "tutorial_report.csv",
                   "tutorial.log"]
        before = {n: (workdir / "out" / n).read_bytes() for n in outputs}
        result = run_cli(["solve", "dc", "--config",
                          CONFIG_DIR / "tutorial.ini"], cwd=workdir)
        assert result.returncode == 0
        for name in outputs:
            assert (workdir / "out" / name).read_bytes() == before[name], name

    def test_missing_case_file_exit_1(self, tmp_path):
        result = run_cli(
            ["solve", "dc", "--config", CONFIG_DIR / "tutorial.ini",
             "--set", "case.path=/gone/grid.m"], cwd=tmp_path)
        assert result.returncode == 1
        assert "/gone/grid.m" in result.stderr

    def test_both_count_and_target_rejected(self, tmp_path):
        result = run_cli(
            ["solve", "dc", "--config", CONFIG_DIR / "tutorial.ini",
             "--set", "solve.k=98"], cwd=tmp_path)
        assert result.returncode == 1
        assert "solve.k" in result.stderr
        assert "solve.epsilon_target" in result.stderr

    def test_neither_count_nor_target_rejected(self, tmp_path):
        result = run_cli(
            ["solve", "dc", "--config", CONFIG_DIR / "tutorial.ini",
             "--set", "solve.epsilon_target="], cwd=tmp_path)
        assert result.returncode == 1
        assert "neither" in result.stderr

    def test_malformed_override_rejected(self, tmp_path):
        result = run_cli(
            ["solve", "dc", "--config", CONFIG_DIR / "tutorial.ini",
             "--set", "nonsense"], cwd=tmp_path)
        assert result.returncode == 1

    def test_overloaded_network_exit_2(self, tmp_path):
        # 500 MW of load behind a 50 MVA line: no dispatch can serve it
        case = tmp_path / "overload.m"
        case.write_text(
            "function mpc = overload\n"
            "mpc.version = '2';\n"
            "mpc.baseMVA = 100;\n"
            "mpc.bus = [\n"
            " 1 3 0 0 0 0 1 1.0 0 135 1 1.1 0.9;\n"
            " 2 1 500 0 0 0 1 1.0 0 135 1 1.1 0.9;\n"
            "];\n"
            "mpc.gen = [\n"
            " 1 0 0 10 -10 1.0 100 1 1000 0"
            + " 0" * 11 + ";\n"
            "];\n"
            "mpc.branch = [\n"
            " 1 2 0.01 0.1 0 50 0 0 0 0 1 -360 360;\n"
            "];\n"
            "mpc.gencost = [\n"
            " 2 0 0 3 0.01 20 0;\n"
            "];\n")
        cfg = tmp_path / "run.ini"
        cfg.write_text(
            f"[case]\npath = {case}\n"
            "[fleet]\nbuses = 2\nforecasts_mw = 10\n"
            "[scenarios]\nzeta = 0.05\nrho = 0.2\n"
            "train_s = 10\ntrain_seed = 1\ntest_s = 10\ntest_seed = 2\n"
            "[solve]\nk = 10\n")
        result = run_cli(["solve", "dc", "--config", cfg], cwd=tmp_path)
        assert result.returncode == 2

    def test_worker_env_accepted(self, tmp_path):
        result = run_cli(
            ["solve", "dc", "--config", CONFIG_DIR / "tutorial.ini",
             "--set", "scenarios.test_s=200", "--set", "solve.report_ro=no"],
            cwd=tmp_path, env_extra={"CCOPF_WORKERS": "2"})
        assert result.returncode == 0

    def test_worker_env_must_be_integer(self, tmp_path):
        result = run_cli(
            ["solve", "dc", "--config", CONFIG_DIR / "tutorial.ini"],
            cwd=tmp_path, env_extra={"CCOPF_WORKERS": "many"})
        assert result.returncode == 1
        assert "CCOPF_WORKERS" in result.stderr


class TestSolveAc:
    def test_artifacts_written(self, tmp_path):
        cfg = tmp_path / "ac.ini"
        cfg.write_text(
            "[case]\npath = pkg:case14q\n"
            "[fleet]\nbuses = 2 3\nforecasts_mw = 20 20\ngamma = 0.1\n"
            "[scenarios]\nzeta = 0.05\nrho = 0.2\n"
            "train_s = 10\ntrain_seed = 3\ntest_s = 50\ntest_seed = 4\n"
            "[solve]\nmodel = ac\nk = 9\nreport_ro = false\n"
            "[output]\nprefix = acmini\n")
        result = run_cli(["solve", "ac", "--config", cfg], cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        out = tmp_path / "out"
        for name in ("acmini_solution.csv", "acmini_report.csv",
                     "acmini_state_bus.csv", "acmini_state_branch.csv",
                     "acmini_trace.csv"):
            assert (out / name).is_file(), name
        bus_rows = read_table(out / "acmini_state_bus.csv")
        assert len(bus_rows) == 14
        assert {"bus", "id", "kind", "p_pu", "q_pu", "vmag_pu",
                "theta_rad"} <= set(bus_rows[0])
        branch_rows = read_table(out / "acmini_state_branch.csv")
        assert len(branch_rows) == 20
        trace = read_table(out / "acmini_trace.csv")
        assert len(trace) >= 1
        assert {"t", "d", "objective"} == set(trace[0])
        assert float(trace[-1]["d"]) <= 1e-4


class TestSweep:
    def test_empty_k_values_rejected(self, tmp_path):
        result = run_cli(
            ["sweep", "--config", CONFIG_DIR / "sweep14.ini",
             "--set", "sweep.k_values= "], cwd=tmp_path)
        assert result.returncode == 1
        assert "k_values" in result.stderr

    def test_out_of_range_k_rejected(self, tmp_path):
        result = run_cli(
            ["sweep", "--config", CONFIG_DIR / "sweep14.ini",
             "--set", "sweep.k_values=150:400:50"], cwd=tmp_path)
        assert result.returncode == 1

    def test_mini_sweep_reruns_identically(self, tmp_path):
        args = ["sweep", "--config", CONFIG_DIR / "sweep14.ini",
                "--set", "scenarios.test_s=300",
                "--set", "scenarios.ro_s=300",
                "--set", "sweep.k_values=198:200:2",
                "--set", "output.prefix=mini"]
        assert run_cli(args, cwd=tmp_path).returncode == 0
        csv_path = tmp_path / "out" / "mini_sweep.csv"
        svg_path = tmp_path / "out" / "mini_sweep.svg"
        assert svg_path.read_text().lstrip().startswith("<svg")
        rows = read_table(csv_path)
        assert [r["k"] for r in rows] == ["200", "198"]
        first = csv_path.read_bytes()
        assert run_cli(args, cwd=tmp_path).returncode == 0
        assert csv_path.read_bytes() == first

    def test_full_14bus_reproduction_config(self, tmp_path):
        result = run_cli(["sweep", "--config", CONFIG_DIR / "sweep14.ini"],
                         cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        rows = read_table(tmp_path / "out" / "sweep14_sweep.csv")
        assert len(rows) == 11
        assert all(r["status"] == "OPTIMAL" for r in rows)
        eps = [float(r["epsilon_star"]) for r in rows]
        assert eps == sorted(eps)
        # enforcing more scenarios can only cost more
        by_k = sorted(rows, key=lambda r: int(r["k"]))
        costs = [float(r["cost"]) for r in by_k]
        assert all(a <= b + 1e-9 for a, b in zip(costs, costs[1:]))
        assert all(float(r["cost_vs_ro"]) <= 1.0 + 1e-6 for r in rows)


class TestEval:
    def test_matches_solve_time_report(self, tutorial_run):
        workdir, _ = tutorial_run
        result = run_cli(
            ["eval", "--config", CONFIG_DIR / "tutorial.ini",
             "--solution", "out/tutorial_solution.csv"], cwd=workdir)
        assert result.returncode == 0, result.stderr
        printed = dict(line.split(": ") for line in
                       result.stdout.strip().splitlines()
                       if ": " in line)
        report = read_table(workdir / "out" / "tutorial_report.csv")
        scalars = {r["metric"]: r["value"] for r in report if not r["name"]}
        assert float(printed["joint_violation_rate"]) == pytest.approx(
            float(scalars["joint_violation_rate"]), abs=1e-12)
        assert (workdir / "out" / "tutorial_eval.csv").is_file()

    def test_missing_solution_file(self, tmp_path):
        result = run_cli(
            ["eval", "--config", CONFIG_DIR / "tutorial.ini",
             "--solution", "void.csv"], cwd=tmp_path)
        assert result.returncode == 1
        assert "void.csv" in result.stderr


class TestHelpers:
    def test_parse_k_values_range(self):
        assert _parse_k_values("180:200:2") == list(range(180, 201, 2))
        assert _parse_k_values("3:5") == [3, 4, 5]
        assert _parse_k_values("7") == [7]
        assert _parse_k_values("1, 2, 9") == [1, 2, 9]

    def test_parse_k_values_bad_step(self):
        with pytest.raises(ValueError):
            _parse_k_values("1:10:0")
        with pytest.raises(ValueError):
            _parse_k_values("1:2:3:4")

    def test_exit_code_mapping(self):
        assert _exit_code_for("OPTIMAL") == 0
        assert _exit_code_for("INFEASIBLE") == 2
        assert _exit_code_for("NUMERICAL_FAILURE") == 3
        assert _exit_code_for("GAP_LIMIT") == 3

    def test_override_requires_section_key_value(self):
        with pytest.raises(CliError):
            _read_config(None, ["not-an-override"])
        cfg = _read_config(None, ["solve.k=5"])
        assert cfg.get("solve", "k") == "5"
