"""Tests for the convergence harness and the command line front end.

Oracles: bilinear sampling against an affine field it must reproduce,
an unperforated study whose micro and macro runs solve the same equation
(E at the arithmetic floor), a small perforated study with pinned values,
and byte-level determinism of the CSV writers. CLI handlers run in
process through main(), so exit codes and output files are checked
without spawning interpreters.
"""

import math
import os

import numpy as np
import pytest

from lphom import cli
from lphom.cell_problem import tensor_field
from lphom.cli import UsageError, load_config_file, main
from lphom.harness import (
    StudyConfig,
    _sample_bilinear,
    convergence_study,
)
from lphom.scenarios import get_scenario


def read_csv(path):
    """Data rows of one of the package's CSV files, as float columns."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line[0].isalpha():
                continue
            rows.append([float(tok) for tok in line.split(",")
                         if tok not in ("true", "false")])
    return rows


class TestNumberParsing:
    def test_fractions_and_decimals(self):
        assert cli._number("1/8") == 0.125
        assert cli._number(" 0.25 ") == 0.25
        assert cli._number("3") == 3.0

    def test_rejects_junk(self):
        with pytest.raises(UsageError):
            cli._number("eps")
        with pytest.raises(UsageError):
            cli._number("1/0")

    def test_eps_list(self):
        assert cli._eps_list("1/4, 1/8") == (0.25, 0.125)
        with pytest.raises(UsageError):
            cli._eps_list(" , ")


class TestConfigFile:
    def test_parses_fractions_and_comments(self, tmp_path):
        p = tmp_path / "study.cfg"
        p.write_text("# study setup\n"
                     "scenario = periodic\n"
                     "epsilon_list = 1/4, 1/8   # the sweep\n"
                     "r = 0.5\n"
                     "cells_per_eps = 8\n"
                     "\n"
                     "dt_rule = h\n")
        vals = load_config_file(str(p))
        assert vals["scenario"] == "periodic"
        assert vals["epsilon_list"] == (0.25, 0.125)
        assert vals["r"] == 0.5
        assert vals["cells_per_eps"] == 8
        assert vals["dt_rule"] == "h"

    def test_unknown_key_is_rejected_with_the_valid_set(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("scenario=periodic\nepslion=0.1\n")
        with pytest.raises(UsageError, match="unknown key 'epslion'"):
            load_config_file(str(p))
        with pytest.raises(UsageError, match="epsilon_list"):
            load_config_file(str(p))

    def test_syntax_and_type_errors(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("just a line\n")
        with pytest.raises(UsageError, match="expected key=value"):
            load_config_file(str(p))
        p.write_text("Nc = many\n")
        with pytest.raises(UsageError, match="must be an integer"):
            load_config_file(str(p))

    def test_missing_file(self):
        with pytest.raises(UsageError, match="cannot read config file"):
            load_config_file("/nonexistent/study.cfg")


class TestExitCodes:
    def test_missing_scenario_is_a_usage_error(self, capsys):
        assert main(["geom"]) == 2
        assert "scenario is required" in capsys.readouterr().err

    def test_unknown_scenario(self, capsys):
        assert main(["geom", "--scenario", "brick"]) == 2

    def test_no_subcommand(self):
        assert main([]) == 2

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("scenario=periodic\nwidth=3\n")
        assert main(["geom", "--config", str(p)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_single_eps_subcommands_reject_sweeps(self, capsys):
        code = main(["micro", "--scenario", "periodic",
                     "--eps", "1/4,1/8", "--outdir", "/tmp"])
        assert code == 2
        assert "single epsilon" in capsys.readouterr().err


class TestGeomCommand:
    def test_rows_and_determinism(self, tmp_path):
        argv = ["geom", "--scenario", "periodic", "--eps", "1/4", "--r", "0.5"]
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(argv + ["--outdir", str(out)]) == 0
            outs.append((out / "geom.csv").read_bytes())
        assert outs[0] == outs[1]
        rows = read_csv(tmp_path / "a" / "geom.csv")
        # side 1/2: a 2x2 covering, each subdomain holding 2x2 cells
        assert len(rows) == 4
        for r in rows:
            assert r[0] == 0.25
            assert r[-2] == 4.0    # interior cells
        header = (tmp_path / "a" / "geom.csv").read_text().splitlines()
        assert header[0] == "# scenario=periodic"


class TestCheckUnfoldCommand:
    def test_identities_hold_at_one_epsilon(self, tmp_path):
        code = main(["check-unfold", "--scenario", "periodic",
                     "--eps", "1/8", "--outdir", str(tmp_path)])
        assert code == 0
        text = (tmp_path / "check_unfold.csv").read_text().splitlines()
        data = [ln for ln in text if ln and not ln.startswith("#")
                and not ln.startswith("check_name")]
        assert len(data) == 3
        names = {ln.split(",")[0] for ln in data}
        assert names == {"integration_pwc", "integration_smooth",
                         "boundary_identity"}
        assert all(ln.endswith(",true") for ln in data)
        # the piecewise-constant identity is exact up to roundoff
        pwc = next(ln for ln in data if ln.startswith("integration_pwc"))
        assert float(pwc.split(",")[4]) <= 1e-12


class TestCellCommand:
    def test_matches_direct_solve_and_roundtrips(self, tmp_path):
        code = main(["cell", "--scenario", "plywood2d",
                     "--points", "0.25,0.5;0.75,0.25", "--Nc", "32",
                     "--outdir", str(tmp_path)])
        assert code == 0
        path = tmp_path / "cell_tensors.csv"
        rows = read_csv(path)
        assert len(rows) == 2

        sc = get_scenario("plywood2d")
        fld = tensor_field(np.array([[0.25, 0.5], [0.75, 0.25]]),
                           sc.suite.A, sc.transform, sc.cell, N_c=32)
        for i, r in enumerate(rows):
            assert np.allclose(r[2:6], fld.tensors[i].ravel(), atol=1e-12)
            assert abs(r[6] - fld.theta[i]) < 1e-12

        back = cli._read_tensor_csv(str(path))
        assert back.N_c == 32
        assert np.allclose(back.tensors, fld.tensors, atol=1e-11)
        assert np.allclose(back.points, fld.points)

    def test_feeds_the_macro_solver(self, tmp_path):
        # the default 8x8 point grid is exactly the macro node set at H=1/8
        assert main(["cell", "--scenario", "periodic", "--Nc", "32",
                     "--outdir", str(tmp_path)]) == 0
        code = main(["macro", "--scenario", "periodic", "--H", "1/8",
                     "--T", "0.05", "--tensors",
                     str(tmp_path / "cell_tensors.csv"),
                     "--outdir", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "macro_series.csv").exists()
        assert (tmp_path / "macro_field.csv").exists()

    def test_mismatched_tensor_nodes_are_rejected(self, tmp_path, capsys):
        assert main(["cell", "--scenario", "periodic", "--Nc", "32",
                     "--points", "0.5,0.5", "--outdir", str(tmp_path)]) == 0
        code = main(["macro", "--scenario", "periodic", "--H", "1/8",
                     "--T", "0.05", "--tensors",
                     str(tmp_path / "cell_tensors.csv"),
                     "--outdir", str(tmp_path)])
        assert code == 2
        assert "does not cover" in capsys.readouterr().err


class TestMicroCommand:
    def test_series_field_and_determinism(self, tmp_path):
        argv = ["micro", "--scenario", "periodic", "--eps", "1/8",
                "--cells-per-eps", "8", "--T", "0.05"]
        blobs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(argv + ["--outdir", str(out)]) == 0
            blobs.append((out / "micro_series.csv").read_bytes()
                         + (out / "micro_field.csv").read_bytes())
        assert blobs[0] == blobs[1]

        rows = read_csv(tmp_path / "a" / "micro_series.csv")
        assert len(rows) == 21            # 20 samples plus t=0
        assert rows[0][0] == 0.0
        assert abs(rows[-1][0] - 0.05) < 1e-12
        fld = read_csv(tmp_path / "a" / "micro_field.csv")
        # one row per fluid cell on the 64^2 grid
        assert 0.7 * 64**2 < len(fld) < 64**2
        assert all(v[2] > 0.0 for v in fld)


class TestConvergeCommand:
    def test_small_study_passes_with_pinned_values(self, tmp_path, capsys):
        code = main(["converge", "--scenario", "periodic",
                     "--eps", "1/4,1/8", "--cells-per-eps", "8",
                     "--Nc", "32", "--H", "1/8", "--T", "0.1",
                     "--outdir", str(tmp_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "verdict: pass" in out
        text = (tmp_path / "convergence.csv").read_text().splitlines()
        assert text[-1] == "# verdict=pass"
        rows = read_csv(tmp_path / "convergence.csv")
        assert len(rows) == 2
        E = [r[1] for r in rows]
        assert E[0] > E[1]
        assert abs(E[0] - 3.768372569783e-03) < 1e-9
        assert abs(E[1] - 2.918703893225e-03) < 1e-9


class TestUnperforatedStudy:
    def test_micro_equals_macro_to_roundoff(self):
        # no perforations and A = I: both solvers integrate the same heat
        # equation from the same initial state; with one shared dt the
        # relative distance sits at the arithmetic floor
        sc = get_scenario("periodic", a=0.0)
        study = StudyConfig(scenario=sc, eps_list=(1 / 4, 1 / 8),
                            cells_per_eps=8, N_c=32, H=1 / 8, T=0.05,
                            dt_rule="0.005")
        rep = convergence_study(study)
        for row in rep.rows:
            assert row.error is None
            assert row.E <= 1e-10
            assert row.lts_gap <= 1e-10


class TestStudyConfigValidation:
    def test_bad_epsilon_lists(self):
        sc = get_scenario("periodic")
        with pytest.raises(ValueError, match="must not be empty"):
            StudyConfig(scenario=sc, eps_list=())
        with pytest.raises(ValueError, match="strictly decreasing"):
            StudyConfig(scenario=sc, eps_list=(1 / 8, 1 / 8))
        with pytest.raises(ValueError, match="lie in"):
            StudyConfig(scenario=sc, eps_list=(2.0, 1 / 8))

    def test_bad_dt_rule(self):
        sc = get_scenario("periodic")
        with pytest.raises(ValueError, match="dt_rule"):
            StudyConfig(scenario=sc, dt_rule="fast")
        with pytest.raises(ValueError, match="positive"):
            StudyConfig(scenario=sc, dt_rule="-0.01")

    def test_bad_sample_count(self):
        with pytest.raises(ValueError, match="n_samples"):
            StudyConfig(scenario=get_scenario("periodic"), n_samples=0)

    def test_dt_rules_resolve(self):
        sc = get_scenario("periodic")
        s = StudyConfig(scenario=sc, eps_list=(1 / 4, 1 / 8), cells_per_eps=8)
        assert s.micro_dt(1 / 4) == 1 / 32
        assert s.macro_dt() == 1 / 64       # finest micro dt in the sweep
        s2 = StudyConfig(scenario=sc, eps_list=(1 / 4,), cells_per_eps=8,
                         dt_rule="0.01")
        assert s2.micro_dt(1 / 4) == 0.01
        assert s2.macro_dt() == 0.01


class TestBilinearSampling:
    def test_reproduces_affine_fields(self):
        H = 0.25
        c = (np.arange(4) + 0.5) * H
        X, Y = np.meshgrid(c, c, indexing="ij")
        vals = 2.0 + 3.0 * X - Y
        rng = np.random.default_rng(3)
        pts = rng.uniform(H / 2, 1 - H / 2, size=(40, 2))
        out = _sample_bilinear(vals, H, pts)
        ref = 2.0 + 3.0 * pts[:, 0] - pts[:, 1]
        assert np.max(np.abs(out - ref)) < 1e-13

    def test_constant_extension_outside_the_centers(self):
        H = 0.25
        c = (np.arange(4) + 0.5) * H
        X, Y = np.meshgrid(c, c, indexing="ij")
        vals = 2.0 + 3.0 * X - Y
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.5]])
        out = _sample_bilinear(vals, H, pts)
        assert abs(out[0] - vals[0, 0]) < 1e-14
        assert abs(out[1] - vals[3, 3]) < 1e-14
        # clamps only the wall-normal coordinate
        assert abs(out[2] - (2.0 + 3.0 * H / 2 - 0.5)) < 1e-13
