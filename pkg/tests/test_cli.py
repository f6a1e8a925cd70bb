"""Command-line interface: flags, config handling, outputs, exit codes."""

import csv
import io
import math
from contextlib import redirect_stdout

import pytest
import yaml

from clonesim import ModelParams, save_dataset, synthesize_data
from clonesim.cli import (EXIT_CONFIG, EXIT_NO_CONVERGENCE, EXIT_OK, EXIT_SOLVER, dump_config,
                          load_config, main)
from clonesim.fitting import FitControl


def run_cli(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(list(argv))
    return code, buf.getvalue()


def read_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def quick_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synthetic.csv"
    save_dataset(synthesize_data(ModelParams(), noise=0.0, seed=1,
                                 control=FitControl(step_divisor=8)), path)
    return str(path)


class TestConfig:
    def test_defaults_resolve(self):
        cfg = load_config(None)
        assert cfg["scenario"]["preset"] == "experiment1"
        assert cfg["solver"]["backend"] == "fast"

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("params:\n  r_e: 1.0\n  bogus: 2.0\n")
        with pytest.raises(Exception):
            load_config(path)
        path.write_text("volume: 11\n")
        with pytest.raises(Exception):
            load_config(path)

    def test_dump_roundtrip(self):
        cfg = load_config(None)
        cfg["params"]["r_e"] = 1.7
        cfg["scenario"]["n0"] = 0.1
        reparsed = yaml.safe_load(dump_config(cfg))
        assert reparsed == cfg

    def test_dump_config_flag(self, tmp_path):
        code, out = run_cli("simulate", "--preset", "experiment2", "--group", "iii",
                            "--dump-config")
        assert code == EXIT_OK
        cfg = yaml.safe_load(out)
        assert cfg["scenario"]["preset"] == "experiment2"
        assert cfg["scenario"]["group"] == "iii"
        path = tmp_path / "cfg.yaml"
        path.write_text(out)
        assert load_config(path) == cfg


class TestSimulate:
    def test_initial_total_matches_dose(self):
        code, out = run_cli("simulate", "--preset", "experiment1", "--n0", "8.5",
                            "--grid-step", "504")
        assert code == EXIT_OK
        header, rows = read_csv(out)
        total_col = header.index("total")
        assert float(rows[0][header.index("time_h")]) == 0.0
        assert float(rows[0][total_col]) == pytest.approx(8.5, abs=0)

    def test_zero_antigen_dose_freezes_totals(self):
        code, out = run_cli("simulate", "--preset", "experiment1", "--n0", "1.3",
                            "--antigen-dose", "0", "--grid-step", "252")
        assert code == EXIT_OK
        header, rows = read_csv(out)
        totals = [float(r[header.index("total")]) for r in rows]
        assert all(v == pytest.approx(1.3, rel=1e-12) for v in totals)

    def test_byte_identical_reruns(self):
        args = ("simulate", "--preset", "experiment2", "--group", "ii",
                "--grid-step", "21")
        code1, out1 = run_cli(*args)
        code2, out2 = run_cli(*args)
        assert code1 == code2 == EXIT_OK
        assert out1 == out2

    def test_multi_cohort_headers_are_prefixed(self):
        code, out = run_cli("simulate", "--preset", "experiment2", "--group", "ii",
                            "--grid-step", "84")
        header, _ = read_csv(out)
        assert "labelled.N" in header and "competing.N" in header
        assert "labelled.T_1" in header and "labelled.D_19" in header

    def test_out_file(self, tmp_path):
        path = tmp_path / "table.csv"
        code, out = run_cli("simulate", "--preset", "experiment1", "--n0", "0.1",
                            "--grid-step", "504", "--out", str(path))
        assert code == EXIT_OK
        assert out == ""
        assert path.exists() and path.read_text().startswith("time_h,")

    def test_param_override_changes_output(self):
        base = run_cli("simulate", "--preset", "experiment1", "--n0", "8.5",
                       "--grid-step", "504")[1]
        tweaked = run_cli("simulate", "--preset", "experiment1", "--n0", "8.5",
                          "--param", "r_e=1.0", "--grid-step", "504")[1]
        assert base != tweaked

    def test_bad_param_override(self):
        code, _ = run_cli("simulate", "--param", "nope=1.0")
        assert code == EXIT_CONFIG
        code, _ = run_cli("simulate", "--param", "r_e")
        assert code == EXIT_CONFIG

    def test_missing_config_file(self):
        code, _ = run_cli("simulate", "--config", "/nonexistent/conf.yaml")
        assert code == EXIT_CONFIG

    def test_solver_failure_exit_code(self):
        # a mesh coarser than the smallest delay cannot be integrated
        code, _ = run_cli("simulate", "--preset", "experiment1", "--n0", "8.5",
                          "--step-h", "10.0")
        assert code == EXIT_SOLVER


class TestReport:
    def test_experiment1_summary(self):
        code, out = run_cli("report", "experiment1")
        assert code == EXIT_OK
        header, rows = read_csv(out)
        byrow = {(r[0], r[1], r[2]): float(r[4]) for r in rows}
        fold0 = byrow[("fold_difference", "94.7/0.1", f"{0.0:.16e}")]
        assert fold0 == pytest.approx(947.0, rel=1e-9)
        slope = byrow[("recruitment_slope_per_log10_dose", "all", "")]
        assert slope == pytest.approx(-6.0, abs=1.5)

    def test_experiment2_recruitment_values(self):
        code, out = run_cli("report", "experiment2")
        assert code == EXIT_OK
        _, rows = read_csv(out)
        rec = {r[1]: float(r[4]) for r in rows if r[0] == "recruitment_pct"}
        assert rec["i"] == pytest.approx(76.0, abs=5.0)
        assert rec["ii"] == pytest.approx(74.0, abs=5.0)
        assert rec["iii"] == pytest.approx(58.0, abs=5.0)

    def test_experiment3_late_cohort_barely_recruits(self):
        code, out = run_cli("report", "experiment3")
        assert code == EXIT_OK
        _, rows = read_csv(out)
        rec = {r[1]: float(r[4]) for r in rows if r[0] == "recruitment_pct"}
        assert rec["iii"] < 1.0


class TestFitCommand:
    def test_single_free_parameter(self, quick_data, tmp_path):
        cfg = tmp_path / "fit.yaml"
        cfg.write_text("fit:\n  step_divisor: 8\n")
        code, out = run_cli("fit", "--config", str(cfg), "--data", quick_data,
                            "--free", "r_N")
        assert code == EXIT_OK
        rows = {(r[0], r[1]): r[2] for r in csv.reader(io.StringIO(out))
                if r and r[0] in ("estimate", "fixed")}
        assert ("estimate", "r_N") in rows
        assert float(rows[("estimate", "r_N")]) == pytest.approx(0.0497, rel=1e-3)
        # everything else is echoed at its fixed value
        for name in ("r_e", "g", "d", "tau", "s"):
            assert float(rows[("fixed", name)]) == getattr(ModelParams(), name)

    def test_empty_data_file(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        code, _ = run_cli("fit", "--data", str(empty))
        assert code == EXIT_CONFIG

    def test_missing_data_argument(self):
        code, _ = run_cli("fit")
        assert code == EXIT_CONFIG

    def test_nonconvergence_exit_code_with_report(self, quick_data, tmp_path):
        cfg = tmp_path / "fit.yaml"
        cfg.write_text(
            "fit:\n  step_divisor: 8\n  max_nfev: 2\n"
            "  initial: {r_N: 0.06, s: 0.0011}\n")
        out_path = tmp_path / "report.csv"
        code, _ = run_cli("fit", "--config", str(cfg), "--data", quick_data,
                          "--free", "r_N,s", "--out", str(out_path))
        assert code == EXIT_NO_CONVERGENCE
        assert out_path.exists()
        assert "diagnostic,status" in out_path.read_text()


class TestSweep:
    def test_grid_rows(self):
        code, out = run_cli("sweep", "--preset", "experiment1", "--n0", "8.5",
                            "--param", "s=0.0005,0.0009", "--param", "d=0.0009",
                            "--step-h", "0.5")
        assert code == EXIT_OK
        header, rows = read_csv(out)
        assert header == ["s", "total_at_horizon", "recruitment_pct"]
        assert len(rows) == 2
        totals = [float(r[1]) for r in rows]
        assert totals[0] != totals[1]

    def test_parallel_matches_sequential(self, monkeypatch):
        args = ("sweep", "--preset", "experiment1", "--n0", "1.3",
                "--param", "s=0.0003,0.0009", "--step-h", "1.0")
        monkeypatch.setenv("CLONESIM_THREADS", "1")
        seq = run_cli(*args)
        monkeypatch.setenv("CLONESIM_THREADS", "2")
        par = run_cli(*args)
        assert seq == par

    def test_requires_a_grid(self):
        code, _ = run_cli("sweep", "--preset", "experiment1")
        assert code == EXIT_CONFIG
