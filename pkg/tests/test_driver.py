"""Driver tests: truth caching, loop bookkeeping, determinism, resume, the LHS
baseline, campaigns, tabulated pools, and the CLI surface."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tailbed.driver import (
    ExperimentConfig,
    build_system,
    build_truth_pdf,
    clone_config,
    compare_campaign,
    load_log,
    run_experiment,
)
from tailbed.stats import Bounds, lhs_sample
from tailbed.systems import TabulatedSystem, save_tabulated


def tiny_cfg(tmp_path, **overrides):
    base = dict(
        name="tiny",
        output_dir=str(tmp_path / "run"),
        seed=0,
        acquisition="uslw",
        n_init=3,
        n_iter=3,
        n_b=1,
        n_q=2000,
        n_pmu=2000,
        pdf_grid_points=256,
        system={"kind": "sir", "e0": 1e7},
        surrogate={"kind": "dno", "ensemble": 2, "hidden_layers": 2, "width": 24,
                   "latent": 12, "epochs": 150},
        truth={"n_test": 2000, "seed": 7, "cache_dir": str(tmp_path / "cache")},
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class DegenerateSystem:
    """Constant-output stand-in for truth-density edge cases."""

    dim = 2
    bounds = Bounds.symmetric(6.0, 2)
    basis = None

    def evaluate(self, xs):
        return np.full(np.atleast_2d(xs).shape[0], 3.0)

    def fingerprint(self):
        return "degenerate"


class TestBuildTruthPdf:
    def test_constant_system_gives_single_bump(self, tmp_path):
        truth = build_truth_pdf(DegenerateSystem(), Bounds.symmetric(6.0, 2),
                                500, seed=0, e0=1.0, cache_dir=tmp_path)
        peak = truth.pdf.grid[np.argmax(truth.pdf.density)]
        assert peak == pytest.approx(3.0, abs=2 * truth.pdf.bandwidth)
        assert np.trapezoid(truth.pdf.density, truth.pdf.grid) == pytest.approx(1.0, abs=1e-2)

    def test_cache_hit_is_bitwise_identical(self, tmp_path):
        sys_ = build_system({"kind": "sir"})
        a = build_truth_pdf(sys_, sys_.bounds, 800, seed=3, e0=1e7, cache_dir=tmp_path)
        blob = a.cache_path.read_bytes()
        b = build_truth_pdf(sys_, sys_.bounds, 800, seed=3, e0=1e7, cache_dir=tmp_path)
        assert b.cache_path == a.cache_path
        assert a.cache_path.read_bytes() == blob
        assert np.array_equal(a.pdf.density, b.pdf.density)

    def test_epidemic_truth_has_heavy_right_tail(self, tmp_path):
        sys_ = build_system({"kind": "sir"})
        truth = build_truth_pdf(sys_, sys_.bounds, 20_000, seed=10_000, e0=1e7,
                                cache_dir=tmp_path)
        vals = truth.outputs / 1e7
        order = np.argsort(vals)
        cumw = np.cumsum(truth.weights[order])
        cumw /= cumw[-1]
        q9999 = vals[order][np.searchsorted(cumw, 0.9999)]
        decades = np.log10(truth.pdf.density.max() / truth.pdf.interp(q9999))
        assert decades >= 3.0


class TestRunExperiment:
    def test_zero_iterations_logs_initial_fit_only(self, tmp_path):
        log = run_experiment(tiny_cfg(tmp_path, n_iter=0))
        assert len(log.records) == 1
        assert log.records[0].iteration == 0
        assert log.records[0].n_samples == 3

    def test_dataset_growth_and_bounds(self, tmp_path):
        cfg = tiny_cfg(tmp_path, n_iter=4, n_b=2)
        log = run_experiment(cfg)
        counts = log.sample_counts
        assert list(counts) == [3 + 2 * i for i in range(5)]
        pts = np.vstack([r.batch_points for r in log.records[1:]])
        assert Bounds.symmetric(6.0, 2).contains(pts).all()

    def test_determinism_modulo_wall_time(self, tmp_path):
        cfg_a = tiny_cfg(tmp_path, output_dir=str(tmp_path / "a"))
        cfg_b = tiny_cfg(tmp_path, output_dir=str(tmp_path / "b"))
        log_a = run_experiment(cfg_a)
        log_b = run_experiment(cfg_b)
        rows_a = [r.to_row() for r in log_a.records]
        rows_b = [r.to_row() for r in log_b.records]
        for ra, rb in zip(rows_a, rows_b):
            assert ra[:3] == rb[:3]       # iteration, n_samples, error
            assert ra[4:] == rb[4:]       # batch points and outputs

    def test_truth_frozen_across_iterations(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        run_experiment(cfg)
        cache_files = list((tmp_path / "cache").glob("truth_*.npz"))
        assert len(cache_files) == 1

    def test_resume_reproduces_trajectory(self, tmp_path):
        full = run_experiment(tiny_cfg(tmp_path, output_dir=str(tmp_path / "full"),
                                       n_iter=4))
        part_cfg = tiny_cfg(tmp_path, output_dir=str(tmp_path / "part"), n_iter=2)
        run_experiment(part_cfg)
        resumed = run_experiment(
            tiny_cfg(tmp_path, output_dir=str(tmp_path / "part"), n_iter=4),
            resume=True)
        for a, b in zip(full.records, resumed.records):
            assert a.to_row()[:3] == b.to_row()[:3]
            assert a.to_row()[4:] == b.to_row()[4:]

    def test_log_round_trip(self, tmp_path):
        cfg = tiny_cfg(tmp_path, n_iter=2)
        log = run_experiment(cfg)
        loaded = load_log(log.log_path)
        assert len(loaded) == len(log.records)
        for a, b in zip(log.records, loaded):
            assert a.iteration == b.iteration
            assert a.n_samples == b.n_samples
            assert a.log_pdf_error == pytest.approx(b.log_pdf_error, rel=1e-15)
            if a.batch_points.size:
                assert np.allclose(a.batch_points, b.batch_points)
            else:
                assert b.batch_points.size == 0

    def test_lhs_baseline_warns_and_runs(self, tmp_path):
        with pytest.warns(UserWarning, match="lhs"):
            cfg = tiny_cfg(tmp_path, acquisition="lhs", n_iter=3)
        log = run_experiment(cfg)
        assert len(log.records) == 4
        assert np.all(np.diff(log.sample_counts) == 1)

    def test_us_acquisition_runs(self, tmp_path):
        log = run_experiment(tiny_cfg(tmp_path, acquisition="us", n_iter=2))
        assert len(log.records) == 3

    def test_gp_surrogate_runs(self, tmp_path):
        cfg = tiny_cfg(tmp_path, surrogate={"kind": "gp", "restarts": 3}, n_iter=2)
        log = run_experiment(cfg)
        assert len(log.records) == 3
        assert np.isfinite(log.errors).all()

    def test_field_export_counts(self, tmp_path):
        cfg = tiny_cfg(tmp_path, export_fields=True, n_iter=3, field_grid_points=9)
        log = run_experiment(cfg)
        fields_dir = log.output_dir / "fields"
        for i in (1, 2, 3):
            for name in ("mean", "variance", "danger", "acquisition"):
                assert (fields_dir / f"iter{i:04d}_{name}.csv").exists()
            with open(fields_dir / f"iter{i:04d}_samples.csv") as f:
                rows = list(csv.DictReader(f))
            kinds = [r["kind"] for r in rows]
            assert kinds.count("init") == 3
            # acquired-so-far plus the highlighted next batch match the log count
            assert kinds.count("acquired") + kinds.count("next") \
                == log.records[i].n_samples - 3

    def test_manifest_written(self, tmp_path):
        cfg = tiny_cfg(tmp_path, n_iter=0)
        log = run_experiment(cfg)
        manifest = json.loads((log.output_dir / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 0
        assert "numpy" in manifest["versions"]

    def test_pdf_artifacts_written(self, tmp_path):
        log = run_experiment(tiny_cfg(tmp_path, n_iter=1))
        truth_tbl = np.loadtxt(log.output_dir / "pdf_truth.csv", delimiter=",",
                               skiprows=1)
        final_tbl = np.loadtxt(log.output_dir / "pdf_final.csv", delimiter=",",
                               skiprows=1)
        assert truth_tbl.shape == final_tbl.shape
        assert np.all(truth_tbl[:, 1] >= 0)


class TestTabulatedDriver:
    @pytest.fixture()
    def pool_path(self, tmp_path):
        rng = np.random.default_rng(0)
        inputs = lhs_sample(400, Bounds.symmetric(4.5, 3), seed=1)
        outputs = np.sum(np.sin(inputs), axis=1) + 0.1 * rng.standard_normal(400)
        path = tmp_path / "pool.csv"
        save_tabulated(TabulatedSystem(inputs, outputs, 1e-9), path)
        return path

    def test_acquisitions_stay_in_pool(self, tmp_path, pool_path):
        cfg = tiny_cfg(
            tmp_path,
            system={"kind": "tabulated", "path": str(pool_path),
                    "match_tolerance": 1e-9, "e0": 1.0},
            surrogate={"kind": "gp", "restarts": 2},
            n_iter=3, n_b=2)
        log = run_experiment(cfg)
        pool = np.loadtxt(pool_path, delimiter=",", skiprows=1)[:, :-1]
        pts = np.vstack([r.batch_points for r in log.records[1:]])
        for p in pts:
            assert np.min(np.linalg.norm(pool - p, axis=1)) < 1e-12
        # no repeated acquisitions
        assert len({tuple(p) for p in pts}) == len(pts)


class TestCampaign:
    def test_single_repeat_median_is_trajectory(self, tmp_path):
        cfg = tiny_cfg(tmp_path, output_dir=str(tmp_path / "camp"), n_iter=2)
        result = compare_campaign([cfg], n_repeats=1, seeds=[0])
        direct = run_experiment(clone_config(
            cfg, seed=0, output_dir=str(tmp_path / "camp" / "tiny" / "rep0x"),
            truth={**cfg.truth}))
        assert np.allclose(result.medians["tiny"], direct.errors)
        assert np.allclose(result.stds["tiny"], 0.0)

    def test_identical_variants_identical_columns(self, tmp_path):
        cfg_a = tiny_cfg(tmp_path, name="a", output_dir=str(tmp_path / "camp"), n_iter=2)
        cfg_b = tiny_cfg(tmp_path, name="b", output_dir=str(tmp_path / "camp"), n_iter=2)
        result = compare_campaign([cfg_a, cfg_b], n_repeats=2, seeds=[5, 6])
        assert np.allclose(result.medians["a"], result.medians["b"])
        with open(result.table_path) as f:
            header = f.readline().strip().split(",")
        assert header == ["iteration", "n_samples", "a_median", "b_median",
                          "a_std", "b_std"]


class TestCli:
    def _write_config(self, tmp_path):
        cfg_text = f"""
[experiment]
name = "cli-tiny"
output_dir = "{tmp_path.as_posix()}/run"
seed = 1
acquisition = "uslw"
n_init = 3
n_iter = 2
n_b = 1
n_q = 1500
n_pmu = 1500
pdf_grid_points = 256

[system]
kind = "sir"
e0 = 1e7

[surrogate]
kind = "dno"
ensemble = 2
hidden_layers = 2
width = 24
latent = 12
epochs = 120

[truth]
n_test = 1500
seed = 7
cache_dir = "{tmp_path.as_posix()}/cache"

[campaign]
repeats = 1
seeds = [1]
[[campaign.variants]]
name = "uslw"
acquisition = "uslw"
[[campaign.variants]]
name = "lhs"
acquisition = "lhs"
"""
        path = tmp_path / "cfg.toml"
        path.write_text(cfg_text)
        return path

    def _run(self, *args):
        return subprocess.run([sys.executable, "-m", "tailbed.cli", *args],
                              capture_output=True, text=True)

    def test_truth_run_campaign_export(self, tmp_path):
        cfg_path = self._write_config(tmp_path)
        res = self._run("truth", "--config", str(cfg_path))
        assert res.returncode == 0, res.stderr
        assert "truth density cached" in res.stdout

        res = self._run("run", "--config", str(cfg_path))
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "run" / "log.csv").exists()

        res = self._run("campaign", "--config", str(cfg_path),
                        "--output", str(tmp_path / "table.csv"))
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "table.csv").exists()

        res = self._run("export-field", "--run-dir", str(tmp_path / "run"),
                        "--grid", "9")
        assert res.returncode == 0, res.stderr
        fields = list((tmp_path / "run" / "fields").glob("*.csv"))
        assert len(fields) == 5  # four field grids plus the sample table
