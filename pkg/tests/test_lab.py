"""Experiment orchestration: configs, seeding, reports, figures, CLI."""
import json
import math
import os

import numpy as np
import pytest

from spikefield import cli, lab
from spikefield.meanfield import SpatialMeasure, measure_from_atoms
from spikefield.metrics import h11_distance
from spikefield.netsim import TrajectoryLog


def tiny_config(experiment, out_dir, **overrides):
    """Desk-scale run that finishes in well under a second."""
    base = dict(n_list=(8,), trials=2, T=0.1, dt=0.02, m_cells=4,
                particle_cap=64, workers=1)
    base.update(overrides)
    return lab.default_config(experiment, str(out_dir), **base)


class TestExperimentConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = tiny_config("convergence", tmp_path)
        again = lab.ExperimentConfig.from_json(json.dumps(cfg.to_json()))
        assert again.to_json() == cfg.to_json()

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError, match="unknown experiment"):
            tiny_config("spectral_gap", tmp_path)
        with pytest.raises(ValueError, match="increasing"):
            tiny_config("convergence", tmp_path, n_list=(32, 16))
        with pytest.raises(ValueError, match="trials"):
            tiny_config("convergence", tmp_path, trials=0)
        with pytest.raises(ValueError, match="horizon"):
            tiny_config("convergence", tmp_path, T=-1.0)
        with pytest.raises(ValueError, match="dt"):
            tiny_config("convergence", tmp_path, dt=0.0)

    def test_default_profiles(self, tmp_path):
        ic = lab.default_config("input_concentration", str(tmp_path))
        assert ic.n_list == (64, 256, 1024) and ic.trials == 200
        assert ic.kernel == {"family": "constant", "w0": 1.0}
        ini = lab.default_config("initial_data", str(tmp_path))
        assert ini.n_list == (100, 400, 1600) and ini.trials == 200
        conv = lab.default_config("convergence", str(tmp_path))
        assert conv.n_list == lab.DEFAULT_N_LIST and conv.trials == 64
        assert conv.kernel == {"family": "uniform_attachment_limit"}
        dual = lab.default_config("dual_regularity", str(tmp_path))
        assert dual.n_list == (128,) and dual.trials == 1


class TestSeeding:
    def test_extending_trials_keeps_earlier_values(self, tmp_path):
        a = lab.run_experiment(tiny_config(
            "initial_data", tmp_path / "a", n_list=(16, 32), trials=2))
        b = lab.run_experiment(tiny_config(
            "initial_data", tmp_path / "b", n_list=(16, 32), trials=4))
        small = {(r["N"], r["trial"]): r["value"] for r in a.rows}
        big = {(r["N"], r["trial"]): r["value"] for r in b.rows}
        assert len(big) == 2 * len(small)
        for key, v in small.items():
            assert big[key] == v

    def test_worker_count_does_not_change_output(self, tmp_path):
        a = lab.run_experiment(tiny_config(
            "initial_data", tmp_path / "w1", n_list=(12, 24), trials=3,
            workers=1))
        b = lab.run_experiment(tiny_config(
            "initial_data", tmp_path / "w2", n_list=(12, 24), trials=3,
            workers=2))
        va = [r["value"] for r in a.rows]
        vb = [r["value"] for r in b.rows]
        assert va == vb
        raw_a = (tmp_path / "w1" / "raw.csv").read_bytes()
        raw_b = (tmp_path / "w2" / "raw.csv").read_bytes()
        assert raw_a == raw_b

    def test_seed_labels_name_the_split(self, tmp_path):
        rep = lab.run_experiment(tiny_config(
            "initial_data", tmp_path, n_list=(8,), trials=2))
        labels = [r["seed"] for r in rep.rows]
        assert labels == ["2024:8:0", "2024:8:1"]


class TestRunExperiment:
    def test_convergence_smoke(self, tmp_path):
        cfg = tiny_config("convergence", tmp_path)
        rep = lab.run_experiment(cfg)
        assert rep.metric == "h11_state_gap"
        assert len(rep.rows) == 2
        assert all(np.isfinite(r["value"]) and r["value"] >= 0 for r in rep.rows)
        assert all(r["bound"] is None for r in rep.rows)
        assert all(r["t"] == cfg.T for r in rep.rows)
        assert rep.passed is None and rep.slope is None  # single N: no fit
        for name in ("raw.csv", "summary.json", "manifest.json"):
            assert (tmp_path / name).exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_a = tiny_config("convergence", tmp_path / "a")
        cfg_b = tiny_config("convergence", tmp_path / "b")
        lab.run_experiment(cfg_a)
        lab.run_experiment(cfg_b)
        for name in ("raw.csv", "summary.json"):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes())

    def test_event_budget_rejects_before_running(self, tmp_path):
        cfg = tiny_config("convergence", tmp_path, n_list=(100_000,),
                          trials=1000, T=1.0)
        with pytest.raises(ValueError, match="budget"):
            lab.run_experiment(cfg)
        assert not (tmp_path / "raw.csv").exists()

    def test_input_concentration_bounds_from_manifest(self, tmp_path):
        cfg = tiny_config("input_concentration", tmp_path, n_list=(8, 16),
                          trials=2)
        rep = lab.run_experiment(cfg)
        assert rep.metric == "input_gap_l1"
        for r in rep.rows:
            # constant kernel w0=1, bernoulli draw: max |w| = 1
            assert r["bound"] == pytest.approx(math.sqrt(cfg.T / r["N"]))
        assert isinstance(rep.passed, bool)

    def test_initial_data_bound_is_two_over_sqrt_n(self, tmp_path):
        rep = lab.run_experiment(tiny_config(
            "initial_data", tmp_path, n_list=(9, 25), trials=2))
        for r in rep.rows:
            assert r["bound"] == pytest.approx(2.0 / math.sqrt(r["N"]))
        assert all(r["t"] == 0.0 for r in rep.rows)

    def test_coupling_smoke(self, tmp_path):
        rep = lab.run_experiment(tiny_config(
            "coupling", tmp_path, n_list=(6,), trials=1))
        assert rep.metric == "coupling_sup_mean"
        assert len(rep.rows) == 1
        assert 0.0 <= rep.rows[0]["value"] <= 1.0

    def test_dual_regularity_report(self, tmp_path):
        rep = lab.run_experiment(tiny_config(
            "dual_regularity", tmp_path, m_cells=2))
        metrics = {r["metric"]: r for r in rep.rows}
        assert set(metrics) == {"phi_w_sup", "dphi_sup"}
        for r in rep.rows:
            assert 0.0 <= r["value"] < r["bound"]
        assert rep.passed is True


class TestReports:
    def test_summary_recomputable_from_raw(self, tmp_path):
        cfg = tiny_config("initial_data", tmp_path, n_list=(8, 16, 32),
                          trials=4)
        lab.run_experiment(cfg)
        rows, summary, manifest = lab.load_report_dir(str(tmp_path))
        by_n = {}
        for r in rows:
            by_n.setdefault(r["N"], []).append(r["value"])
        for agg in summary["aggregates"]:
            vals = np.array(by_n[agg["N"]])
            assert agg["mean"] == pytest.approx(vals.mean(), abs=1e-12)
            expect_se = vals.std(ddof=1) / math.sqrt(vals.size)
            assert agg["stderr"] == pytest.approx(expect_se, abs=1e-12)
        fit = lab._ols_slope([a["N"] for a in summary["aggregates"]],
                             [a["mean"] for a in summary["aggregates"]])
        assert summary["slope"]["slope"] == pytest.approx(fit["slope"])
        assert manifest["config"] == cfg.to_json()

    def test_raw_values_roundtrip_exactly(self, tmp_path):
        rep = lab.run_experiment(tiny_config(
            "initial_data", tmp_path, n_list=(8,), trials=3))
        rows, _, _ = lab.load_report_dir(str(tmp_path))
        assert [r["value"] for r in rows] == [r["value"] for r in rep.rows]

    def test_bound_cell_empty_when_undeclared(self, tmp_path):
        lab.run_experiment(tiny_config("convergence", tmp_path))
        rows, summary, _ = lab.load_report_dir(str(tmp_path))
        assert all(r["bound"] is None for r in rows)
        assert summary["passed"] is None

    def test_empty_rows_emit_headers_only(self, tmp_path):
        cfg = tiny_config("convergence", tmp_path)
        rep = lab.ExperimentReport("convergence", "h11_state_gap", (), (),
                                   None, None, cfg)
        lab.emit_report(rep)
        lines = (tmp_path / "raw.csv").read_text().splitlines()
        assert lines == ["experiment,N,trial,t,metric,value,bound,seed"]
        with open(tmp_path / "summary.json") as fh:
            summary = json.load(fh)
        assert summary["aggregates"] == []

    def test_missing_manifest_tolerated(self, tmp_path):
        lab.run_experiment(tiny_config("initial_data", tmp_path, n_list=(8,)))
        os.remove(tmp_path / "manifest.json")
        _, _, manifest = lab.load_report_dir(str(tmp_path))
        assert manifest is None

    def test_render_figures_mc(self, tmp_path):
        lab.run_experiment(tiny_config(
            "initial_data", tmp_path, n_list=(8, 16), trials=2))
        paths = lab.render_figures(str(tmp_path))
        assert [os.path.basename(p) for p in paths] == ["scaling.png",
                                                        "trials.png"]
        for p in paths:
            assert os.path.getsize(p) > 1000

    def test_render_figures_dual(self, tmp_path):
        lab.run_experiment(tiny_config("dual_regularity", tmp_path,
                                       m_cells=2))
        paths = lab.render_figures(str(tmp_path))
        assert [os.path.basename(p) for p in paths] == ["scaling.png"]
        assert os.path.getsize(paths[0]) > 1000


class TestCli:
    def test_simulate(self, tmp_path, capsys):
        cfg = {"model": dict(lab.DEFAULT_MODEL), "n": 4, "T": 0.2,
               "seed": 3, "n_samples": 17}
        rc = cli.main(["simulate", json.dumps(cfg), "--out", str(tmp_path)])
        assert rc == 0
        log = TrajectoryLog.from_csv(tmp_path / "states.csv",
                                     tmp_path / "spikes.csv")
        assert log.states.shape == (17, 4)
        with open(tmp_path / "simulate_manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["seed"] == 3
        assert "wrote" in capsys.readouterr().out

    def test_simulate_config_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": dict(lab.DEFAULT_MODEL),
                                    "n": 2, "T": 0.1}))
        rc = cli.main(["simulate", str(path), "--out", str(tmp_path)])
        assert rc == 0

    def test_solve_pde(self, tmp_path, capsys):
        cfg = {"model": dict(lab.DEFAULT_MODEL), "m_cells": 2, "T": 0.1,
               "dt": 0.02, "kernel": {"family": "constant", "w0": 1.0}}
        rc = cli.main(["solve-pde", json.dumps(cfg), "--out", str(tmp_path)])
        assert rc == 0
        mu = SpatialMeasure.from_csv(tmp_path / "measure_t0.1.csv")
        assert mu.m_cells == 2
        assert abs(mu.probability_defect()) < 1e-9
        assert (tmp_path / "field.csv").exists()
        assert "mass drift" in capsys.readouterr().out

    def test_graphon_generate_norms_distance(self, tmp_path, capsys):
        wpath = tmp_path / "w.csv"
        rc = cli.main(["graphon", "generate", "uniform_attachment", "6",
                       str(wpath), "--seed", "4"])
        assert rc == 0 and wpath.exists()

        from spikefield.graphon import StepGraphon
        kpath = tmp_path / "k.csv"
        StepGraphon.from_kernel("constant", 2, w0=0.5).to_csv(kpath)
        capsys.readouterr()
        rc = cli.main(["graphon", "norms", str(kpath)])
        out = json.loads(capsys.readouterr().out)
        assert rc == 0
        assert out["op_norm"] == pytest.approx(0.5)
        assert out["sup"] == pytest.approx(0.5)

        rc = cli.main(["graphon", "distance", str(kpath), str(kpath)])
        out = json.loads(capsys.readouterr().out)
        assert rc == 0
        assert out["cut_distance"] == 0.0 and out["exact"] is True

    def test_graphon_norms_accepts_weight_matrix_csv(self, tmp_path, capsys):
        # a generated matrix must feed straight back into norms/distance
        from spikefield.graphon import (Partition, WeightMatrix,
                                        op_norm_inf_to_1, step_graphon)
        wpath = tmp_path / "w.csv"
        rc = cli.main(["graphon", "generate", "constant", "6", str(wpath),
                       "--w0", "0.5", "--mode", "deterministic"])
        assert rc == 0
        capsys.readouterr()

        rc = cli.main(["graphon", "norms", str(wpath)])
        out = json.loads(capsys.readouterr().out)
        assert rc == 0
        w = WeightMatrix.from_csv(wpath)
        g = step_graphon(w, Partition.identity(w.n))
        assert out["op_norm"] == op_norm_inf_to_1(g).value
        assert out["sup"] == 0.5

        rc = cli.main(["graphon", "distance", str(wpath), str(wpath)])
        out = json.loads(capsys.readouterr().out)
        assert rc == 0
        assert out["cut_distance"] == 0.0 and out["exact"] is True

    def test_metric(self, tmp_path, capsys):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        measure_from_atoms(1, [0.0], [1.0]).to_csv(p1)
        measure_from_atoms(1, [0.5], [1.0]).to_csv(p2)
        rc = cli.main(["metric", "h11", str(p1), str(p2)])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        direct = h11_distance(SpatialMeasure.from_csv(p1),
                              SpatialMeasure.from_csv(p2))
        assert out["value"] == pytest.approx(direct.value)

    def test_experiment_run_and_report(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        cfg = tiny_config("initial_data", out_dir, n_list=(8, 16))
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg.to_json()))
        rc = cli.main(["experiment", "run", str(cfg_path)])
        assert rc == 0
        assert "rows" in capsys.readouterr().out
        rc = cli.main(["experiment", "report", str(out_dir)])
        assert rc == 0
        assert (out_dir / "scaling.png").exists()
        assert (out_dir / "trials.png").exists()

    def test_experiment_report_exit_2_on_violation(self, tmp_path, capsys):
        lab.run_experiment(tiny_config("initial_data", tmp_path, n_list=(8,)))
        spath = tmp_path / "summary.json"
        summary = json.loads(spath.read_text())
        summary["passed"] = False
        spath.write_text(json.dumps(summary))
        rc = cli.main(["experiment", "report", str(tmp_path)])
        assert rc == 2
        assert "VIOLATED" in capsys.readouterr().err

    def test_experiment_run_exit_2_on_violation(self, tmp_path, monkeypatch,
                                                capsys):
        cfg = tiny_config("initial_data", tmp_path, n_list=(8,))
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg.to_json()))
        real = lab.run_experiment

        def failing(config):
            rep = real(config)
            return lab.ExperimentReport(rep.experiment, rep.metric, rep.rows,
                                        rep.aggregates, rep.slope, False,
                                        rep.config)

        monkeypatch.setattr(lab, "run_experiment", failing)
        rc = cli.main(["experiment", "run", str(cfg_path)])
        assert rc == 2
        assert "VIOLATED" in capsys.readouterr().err
