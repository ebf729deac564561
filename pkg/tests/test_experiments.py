"""
Tests for experiments.py: run directories, sweeps, comparison and the CLI.

Tests cover:
- Run directory layout, summary and manifest
- Reproducible artifacts across output roots
- Manifest verification (tampered and missing files)
- Registry bookkeeping for runs and sweeps
- Diverged runs (exit code, summary)
- compare / reproduce-figures tables, bundled sweep configs end to end
- CLI exit codes
"""

import csv
import json

import pytest

import sys
from pathlib import Path

SKILL_DIR = Path(__file__).parent.parent / "skills" / "parallel-sgd-lab" / "scripts"
sys.path.insert(0, str(SKILL_DIR))

from config import load_config
from db import get_connection, get_run, get_sweep_cells, init_db, list_artifacts
from errors import EXIT_CONFIG_ERROR, EXIT_DIVERGED, EXIT_FAILURE, EXIT_OK
from experiments import (
    ARTIFACTS,
    COMPARE_HEADER,
    FIGURE_HEADER,
    compare_runs,
    main,
    reproduce_figures,
    run_experiment,
    run_sweep,
    verify_manifest,
)

CONFIGS_DIR = Path(__file__).parent.parent / "skills" / "parallel-sgd-lab" / "configs"

BASE_CONFIG = """\
experiment.name = small
seed = 42
data.task = linreg
data.n = 300
data.d = 4
data.noise = 0.1
data.cond = 2.0
strategy.kind = {kind}
strategy.n_workers = {n_workers}
strategy.sync_period = 5
strategy.lr = {lr}
train.minibatch = 10
train.epochs_max = 3
train.warm_start_epochs = {warm}
train.schedule = constant
timing.exchange_cost = 2.0
"""


def write_config(tmp_path, name="small.conf", kind="bsp", n_workers=2, lr=0.1, warm=1, extra=""):
    path = tmp_path / name
    path.write_text(BASE_CONFIG.format(kind=kind, n_workers=n_workers, lr=lr, warm=warm) + extra)
    return path


@pytest.fixture
def conn():
    c = get_connection(":memory:")
    init_db(c)
    yield c
    c.close()


@pytest.fixture
def finished_run(tmp_path):
    cfg = load_config(write_config(tmp_path))
    result = run_experiment(cfg, tmp_path / "out")
    assert result["success"]
    return Path(result["run_dir"])


# ─── Single run ──────────────────────────────────────────────────


class TestRunExperiment:
    def test_writes_every_artifact(self, finished_run):
        for name in ARTIFACTS + ("manifest.json",):
            assert (finished_run / name).exists()
        assert finished_run.name.startswith("small-bsp-n2-tau5-mb10-")

    def test_summary(self, finished_run):
        summary = json.loads((finished_run / "summary.json").read_text())
        assert summary["status"] == "max-epochs"
        assert summary["epochs"] == 3
        assert summary["final_cv_loss"] < summary["initial_cv_loss"]
        assert summary["model"] == {"kind": "linear-regression", "layer_dims": [4, 1]}
        assert summary["speedup"] > 0

    def test_manifest(self, finished_run):
        manifest = json.loads((finished_run / "manifest.json").read_text())
        assert set(manifest["artifacts"]) == set(ARTIFACTS)
        assert len(manifest["config_hash"]) == 64
        assert manifest["config"]["strategy.kind"] == "bsp"
        assert "numpy" in manifest["versions"]

    def test_curve_has_one_row_per_epoch(self, finished_run):
        with open(finished_run / "learning_curve.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]

    def test_reproducible_artifacts(self, tmp_path):
        cfg = load_config(write_config(tmp_path, kind="asgd"))
        a = Path(run_experiment(cfg, tmp_path / "a")["run_dir"])
        b = Path(run_experiment(cfg, tmp_path / "b")["run_dir"])
        assert a.name == b.name
        for name in ARTIFACTS:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_records_registry(self, tmp_path, conn):
        cfg = load_config(write_config(tmp_path))
        result = run_experiment(cfg, tmp_path / "out", conn=conn)
        run = get_run(conn, result["run_dir"])
        assert run["status"] == "max-epochs"
        assert run["epochs"] == 3
        assert run["config_hash"] == result["config_hash"]
        assert [a["name"] for a in list_artifacts(conn, run["id"])] == sorted(ARTIFACTS)

    def test_diverged_run(self, tmp_path, conn):
        cfg = load_config(write_config(tmp_path, lr=50.0, warm=0))
        result = run_experiment(cfg, tmp_path / "out", conn=conn)
        assert result["success"]
        assert result["status"] == "diverged"
        assert result["exit_code"] == EXIT_DIVERGED
        assert result["summary"]["final_cv_loss"] is None
        assert get_run(conn, result["run_dir"])["status"] == "diverged"


class TestVerifyManifest:
    def test_clean_run(self, finished_run):
        result = verify_manifest(str(finished_run))
        assert result["success"]
        assert result["problems"] == []

    def test_tampered_artifact(self, finished_run):
        with open(finished_run / "trace.csv", "a") as f:
            f.write("0,0,pull,0,\n")
        result = verify_manifest(str(finished_run))
        assert not result["success"]
        assert result["problems"] == ["trace.csv: checksum mismatch"]

    def test_missing_artifact(self, finished_run):
        (finished_run / "final.ckpt").unlink()
        assert verify_manifest(str(finished_run))["problems"] == ["final.ckpt: missing"]

    def test_no_manifest(self, tmp_path):
        assert not verify_manifest(str(tmp_path))["success"]


# ─── Sweeps ──────────────────────────────────────────────────────


class TestRunSweep:
    def test_sequential_sweep(self, tmp_path, conn):
        path = write_config(tmp_path, extra="sweep.strategy_kind = bsp, asgd\n")
        cfg = load_config(path)
        result = run_sweep(cfg, tmp_path / "out", jobs=1, conn=conn)
        assert result["success"]
        assert [r["status"] for r in result["results"]] == ["max-epochs", "max-epochs"]
        cells = get_sweep_cells(conn, result["sweep"])
        assert [c["label"] for c in cells] == ["bsp-n2-tau5-mb10", "asgd-n2-tau5-mb10"]
        assert all(c["status"] == "completed" for c in cells)
        assert all(get_run(conn, r["run_dir"]) for r in result["results"])

    def test_tau_sweep_config(self, tmp_path, conn):
        cfg = load_config(CONFIGS_DIR / "tau-sweep.conf")
        result = run_sweep(cfg, tmp_path / "out", jobs=1, conn=conn)
        assert result["success"]
        results = result["results"]
        assert len(results) == 8
        assert all(r["status"] in ("max-epochs", "converged", "diverged") for r in results)
        for r in results:
            assert (Path(r["run_dir"]) / "learning_curve.csv").exists()

        out = tmp_path / "curves.csv"
        figures = reproduce_figures([r["run_dir"] for r in results], str(out))
        assert figures["series"] == 8
        assert figures["warnings"] == []
        with open(out, newline="") as f:
            cells = {(row["strategy"], row["sync_period"]) for row in csv.DictReader(f)}
        assert cells == {(kind, str(tau)) for kind in ("asgd", "bmuf") for tau in (1, 5, 20, 80)}

    def test_best_sync_period_config(self, tmp_path):
        cfg = load_config(CONFIGS_DIR / "best-sync-period.conf", {"data.n": 800, "train.epochs_max": 2})
        result = run_sweep(cfg, tmp_path / "out")
        assert result["success"]
        kinds = {json.loads((Path(r["run_dir"]) / "summary.json").read_text())["strategy"] for r in result["results"]}
        assert kinds == {"asgd", "bmuf", "bsp", "easgd-async"}

        out = tmp_path / "curves.csv"
        figures = reproduce_figures([r["run_dir"] for r in result["results"]], str(out))
        assert figures["series"] == 4
        with open(out, newline="") as f:
            taus = {row["strategy"]: row["sync_period"] for row in csv.DictReader(f)}
        assert taus == {"asgd": "1", "bmuf": "80", "bsp": "5", "easgd-async": "64"}


# ─── Compare / figures ───────────────────────────────────────────


class TestCompare:
    @pytest.fixture
    def runs(self, tmp_path):
        dirs = []
        for kind, n_workers in (("bsp", 1), ("bsp", 4), ("bmuf", 4)):
            cfg = load_config(write_config(tmp_path, f"{kind}{n_workers}.conf", kind, n_workers))
            dirs.append(run_experiment(cfg, tmp_path / "out")["run_dir"])
        return dirs

    def test_baseline_is_single_worker(self, runs, tmp_path):
        out = tmp_path / "table.csv"
        result = compare_runs(runs, str(out))
        assert result["success"]
        rows = result["rows"]
        assert rows[0]["n_workers"] == 1
        assert rows[0]["speedup"] == pytest.approx(1.0)
        assert all(r["speedup"] > 0 for r in rows)
        with open(out, newline="") as f:
            reader = csv.DictReader(f)
            assert reader.fieldnames == COMPARE_HEADER
            assert len(list(reader)) == 3

    def test_rejects_different_tasks(self, tmp_path, finished_run):
        cfg = load_config(write_config(tmp_path, "other.conf"), {"seed": 7})
        other = run_experiment(cfg, tmp_path / "out")["run_dir"]
        result = compare_runs([str(finished_run), other])
        assert not result["success"]
        assert "differs" in result["message"]

    def test_diverged_shows_divergence(self, tmp_path, finished_run):
        cfg = load_config(write_config(tmp_path, "bad.conf", lr=50.0, warm=0))
        bad = run_experiment(cfg, tmp_path / "out")["run_dir"]
        rows = compare_runs([str(finished_run), bad])["rows"]
        assert rows[1]["final_cv_loss"] == "divergence"
        assert rows[1]["speedup"] is None

    def test_self_comparison(self, finished_run):
        rows = compare_runs([str(finished_run), str(finished_run)])["rows"]
        assert rows[1]["speedup"] == 1.0
        assert rows[0]["final_cv_loss"] == rows[1]["final_cv_loss"]

    def test_bmuf_without_momentum_matches_bsp(self, tmp_path):
        dirs = []
        for kind, extra in (("bsp", ""), ("bmuf", "strategy.block_momentum = 0.0\n")):
            cfg = load_config(write_config(tmp_path, f"{kind}.conf", kind, 4, extra=extra))
            dirs.append(run_experiment(cfg, tmp_path / "out")["run_dir"])
        bsp, bmuf = compare_runs(dirs)["rows"]
        assert bsp["final_cv_loss"] == bmuf["final_cv_loss"]
        assert bsp["epochs"] == bmuf["epochs"]

    def test_missing_summary(self, tmp_path):
        assert not compare_runs([str(tmp_path)])["success"]

    def test_figures_skip_incomplete(self, runs, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        out = tmp_path / "curves.csv"
        result = reproduce_figures(runs + [str(empty)], str(out))
        assert result["success"]
        assert result["series"] == 3
        assert result["rows"] == 9
        assert len(result["warnings"]) == 1
        with open(out, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == FIGURE_HEADER
        assert rows[1][:3] == ["bsp", "1", "1"]
        assert rows[1][4:] == ["5", "10"]


# ─── CLI ─────────────────────────────────────────────────────────


class TestMain:
    def test_run(self, tmp_path, capsys):
        path = write_config(tmp_path)
        code = main(["--db", str(tmp_path / "r.db"), "run", "--config", str(path), "--out", str(tmp_path / "out")])
        assert code == EXIT_OK
        run_dir = capsys.readouterr().out.strip()
        assert Path(run_dir).parent == tmp_path / "out"
        assert main(["verify", run_dir]) == EXIT_OK

    def test_bad_config(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("strategy.kind = hogwild\n")
        assert main(["--db", str(tmp_path / "r.db"), "run", "--config", str(path)]) == EXIT_CONFIG_ERROR

    def test_missing_config(self, tmp_path):
        code = main(["--db", str(tmp_path / "r.db"), "run", "--config", str(tmp_path / "nope.conf")])
        assert code == EXIT_CONFIG_ERROR

    def test_run_refuses_sweep(self, tmp_path):
        path = write_config(tmp_path, extra="sweep.sync_period = 1, 5\n")
        code = main(["--db", str(tmp_path / "r.db"), "run", "--config", str(path), "--out", str(tmp_path)])
        assert code == EXIT_CONFIG_ERROR

    def test_diverged_exit_code(self, tmp_path):
        path = write_config(tmp_path, lr=50.0, warm=0)
        code = main(["--db", str(tmp_path / "r.db"), "run", "--config", str(path), "--out", str(tmp_path / "out")])
        assert code == EXIT_DIVERGED

    def test_compare_to_stdout(self, finished_run, capsys):
        assert main(["compare", str(finished_run)]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.splitlines()[0] == ",".join(COMPARE_HEADER)

    def test_verify_failure(self, tmp_path):
        assert main(["verify", str(tmp_path)]) == EXIT_FAILURE

    def test_fit_speedup(self, capsys):
        code = main(["fit-speedup", str(CONFIGS_DIR / "published_speedups.csv"), "--structure", "shared-ratio"])
        assert code == EXIT_OK
        fit = json.loads(capsys.readouterr().out)
        assert fit["structure"] == "shared-ratio"

    @pytest.mark.parametrize("name", ["best_sync_period_speedups.csv", "cldnn_speedups.csv"])
    def test_fit_strategy_speedups(self, name, tmp_path, capsys):
        report = tmp_path / "report.csv"
        code = main(["fit-speedup", str(CONFIGS_DIR / name), "--structure", "per-period-ratio", "--report", str(report)])
        assert code == EXIT_OK
        fit = json.loads(capsys.readouterr().out)
        assert fit["utilization"] >= 1.0
        assert all(r >= 0.0 for r in fit["ratios"].values())
        with open(report, newline="") as f:
            assert len(list(csv.DictReader(f))) == len(fit["residuals"])
