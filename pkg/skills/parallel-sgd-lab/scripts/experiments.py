#!/usr/bin/env python3
"""
Experiment runner for the parallel-SGD lab.

Generates the synthetic task, warm-starts a shared initial model, runs the
cluster simulation and writes one directory per run:

    <out>/<name>-<label>-<hash12>/
        learning_curve.csv   epoch,train_loss,cv_loss,lr,sim_time
        trace.csv            time,worker,kind,seq,staleness
        final.ckpt           final global model (PSYN1 checkpoint)
        summary.json         losses, status, timings, speedup
        manifest.json        config, artifact checksums, versions, timestamps

Runs, artifacts and sweep cells are also recorded in the SQLite registry
(db.py).

Exit codes: 0 ok, 1 failure, 2 diverged, 64 configuration error.

Environment:
    PSYN_OUT         default output root
    PSYN_DB          registry path (default <out>/psyn.db)
    PSYN_LOG_LEVEL   log level (default WARNING)

Usage:
    python3 experiments.py run --config configs/four-strategy.conf
    python3 experiments.py sweep --config configs/tau-sweep.conf --jobs 4
    python3 experiments.py compare RUN_DIR RUN_DIR ... --out table.csv
    python3 experiments.py reproduce-figures RUN_DIR ... --out curves.csv
    python3 experiments.py fit-speedup configs/published_speedups.csv --structure per-period-ratio
    python3 experiments.py verify RUN_DIR
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from cluster_sim import (
    read_curve_csv,
    reference_seconds_per_epoch,
    run_simulation,
    staleness_histogram,
    warm_start,
    write_curve_csv,
    write_trace_csv,
)
from config import ExperimentConfig, load_config
from data_shard import cv_split, make_synthetic, shard
from db import (
    add_artifact,
    add_sweep_cell,
    finish_run,
    get_connection,
    init_db,
    log_event,
    register_run,
    update_sweep_cell,
)
from errors import EXIT_CONFIG_ERROR, EXIT_DIVERGED, EXIT_FAILURE, EXIT_OK, ConfigError, PsynError
from numkit import RngState, init_model, save_checkpoint
from speedup_model import STRUCTURES, fit_model, read_observations, write_fit_report

__version__ = "0.1.0"

logger = logging.getLogger(__name__)

ARTIFACTS = ("learning_curve.csv", "trace.csv", "final.ckpt", "summary.json")
COMPARE_HEADER = [
    "run", "strategy", "n_workers", "sync_period", "minibatch", "status",
    "final_cv_loss", "epochs", "sim_time", "speedup", "speedup_vs_single",
]
FIGURE_HEADER = ["strategy", "n_workers", "epoch", "cv_loss", "sync_period", "minibatch"]


# ─── Helpers ─────────────────────────────────────────────────────


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _json_float(value: Optional[float]):
    if value is None or not math.isfinite(value):
        return None
    return value


def run_dir_for(cfg: ExperimentConfig, out_root: Optional[Path] = None) -> Path:
    root = Path(out_root) if out_root else cfg.output_root()
    return root / f"{cfg.experiment_name}-{cfg.label}-{cfg.config_hash()[:12]}"


# ─── Single run ──────────────────────────────────────────────────


def execute_run(cfg: ExperimentConfig, out_root: Optional[Path] = None) -> dict:
    """Warm start, simulate and write the run directory. No registry access.

    Returns:
        dict with success, message, run_dir, status, exit_code, summary, artifacts.
    """
    started = _now()
    run_dir = run_dir_for(cfg, out_root)
    run_dir.mkdir(parents=True, exist_ok=True)

    data = make_synthetic(
        cfg.data_task, cfg.data_n, cfg.data_d, cfg.data_noise, cfg.data_cond, cfg.seed, cfg.data_classes
    )
    train, cv = cv_split(data, cfg.data_cv_fraction, cfg.seed)
    kind, dims = cfg.model_spec()
    model = init_model(kind, dims, RngState(cfg.seed, 0))
    if cfg.train_warm_start_epochs:
        model = warm_start(model, train, cfg.train_minibatch, cfg.strategy_lr, cfg.seed, cfg.train_warm_start_epochs)

    sim_config = cfg.sim_config()
    sharded = shard(
        train, cfg.strategy_n_workers, cfg.strategy_sync_period, cfg.train_minibatch, cfg.seed,
        reshuffle=cfg.data_reshuffle,
    )
    result = run_simulation(sim_config, model, sharded, cv=cv)

    ref_spe = reference_seconds_per_epoch(train.n, cfg.train_minibatch, sim_config.compute_time_per_minibatch[0])
    speedup = ref_spe / result.seconds_per_epoch if result.seconds_per_epoch > 0 else None
    last = result.learning_curve[-1] if result.learning_curve else None

    write_curve_csv(result.learning_curve, run_dir / "learning_curve.csv")
    write_trace_csv(result.trace, run_dir / "trace.csv")
    save_checkpoint(model.with_params(result.final_global), run_dir / "final.ckpt")
    summary = {
        "name": cfg.experiment_name,
        "label": cfg.label,
        "strategy": cfg.strategy_kind,
        "n_workers": cfg.strategy_n_workers,
        "sync_period": cfg.strategy_sync_period,
        "minibatch": cfg.train_minibatch,
        "status": result.status,
        "message": result.message,
        "epochs": result.epochs_completed,
        "initial_train_loss": result.initial_train_loss,
        "initial_cv_loss": result.initial_cv_loss,
        "final_train_loss": last.train_loss if last else None,
        "final_cv_loss": _json_float(result.final_cv_loss),
        "sim_time": result.simulated_wall_clock,
        "seconds_per_epoch": result.seconds_per_epoch,
        "reference_seconds_per_epoch": ref_spe,
        "speedup": speedup,
        "staleness_histogram": {str(k): v for k, v in staleness_histogram(result.trace).items()},
        "data": {
            "task": cfg.data_task, "n": cfg.data_n, "d": cfg.data_d, "noise": cfg.data_noise,
            "cond": cfg.data_cond, "classes": cfg.data_classes, "seed": cfg.seed,
            "cv_fraction": cfg.data_cv_fraction,
        },
        "model": {"kind": kind, "layer_dims": list(dims)},
    }
    _write_json(run_dir / "summary.json", summary)

    artifacts = {}
    for name in ARTIFACTS:
        path = run_dir / name
        artifacts[name] = {"path": name, "sha256": sha256_file(path), "bytes": path.stat().st_size}

    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "artifacts": artifacts,
        "versions": {
            "psyn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "started_at": started,
        "finished_at": _now(),
        "status": result.status,
    }
    _write_json(run_dir / "manifest.json", manifest)

    diverged = result.diverged
    return {
        "success": True,
        "message": f"{cfg.label}: {result.status} after {result.epochs_completed} epoch(s)",
        "run_dir": str(run_dir),
        "status": result.status,
        "exit_code": EXIT_DIVERGED if diverged else EXIT_OK,
        "summary": summary,
        "artifacts": artifacts,
        "config_hash": cfg.config_hash(),
    }


def record_run(conn, cfg: ExperimentConfig, outcome: dict) -> int:
    """Write a finished run and its artifacts to the registry."""
    run_dir = outcome["run_dir"]
    run_id = register_run(
        conn, run_dir, cfg.experiment_name, outcome["config_hash"], cfg.strategy_kind,
        cfg.strategy_n_workers, cfg.strategy_sync_period, cfg.train_minibatch,
    )
    for name, meta in outcome["artifacts"].items():
        add_artifact(conn, run_id, name, str(Path(run_dir) / meta["path"]), meta["sha256"], meta["bytes"])
    summary = outcome["summary"]
    finish_run(
        conn, run_id, outcome["status"], summary["final_cv_loss"], summary["epochs"],
        summary["sim_time"], summary["speedup"],
    )
    log_event(conn, "run-finished", run_dir, outcome["message"], {"status": outcome["status"]})
    return run_id


def run_experiment(cfg: ExperimentConfig, out_root: Optional[Path] = None, conn=None) -> dict:
    """execute_run plus registry bookkeeping; failures become a result dict."""
    try:
        outcome = execute_run(cfg, out_root)
    except ConfigError as e:
        return {"success": False, "message": str(e), "exit_code": EXIT_CONFIG_ERROR}
    except (PsynError, OSError) as e:
        logger.exception("run %s failed", cfg.label)
        if conn is not None:
            log_event(conn, "run-failed", str(run_dir_for(cfg, out_root)), str(e))
        return {"success": False, "message": f"{cfg.label}: {e}", "exit_code": EXIT_FAILURE}
    if conn is not None:
        record_run(conn, cfg, outcome)
    return outcome


def verify_manifest(run_dir: str) -> dict:
    """Check every artifact in a run's manifest exists and matches its checksum."""
    root = Path(run_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        return {"success": False, "message": f"No manifest in {root}", "problems": ["manifest.json missing"]}
    manifest = json.loads(manifest_path.read_text())
    problems = []
    for name, meta in manifest.get("artifacts", {}).items():
        path = root / meta["path"]
        if not path.exists():
            problems.append(f"{name}: missing")
        elif sha256_file(path) != meta["sha256"]:
            problems.append(f"{name}: checksum mismatch")
    if problems:
        return {"success": False, "message": f"{len(problems)} problem(s) in {root}", "problems": problems}
    return {"success": True, "message": f"{len(manifest['artifacts'])} artifacts verified", "problems": []}


# ─── Sweeps ──────────────────────────────────────────────────────


def _run_cell(cfg: ExperimentConfig, out_root: Optional[str]) -> dict:
    """Process-pool entry point; the parent owns the registry."""
    return run_experiment(cfg, Path(out_root) if out_root else None, conn=None)


def run_sweep(cfg: ExperimentConfig, out_root: Optional[Path] = None, jobs: int = 1, conn=None) -> dict:
    """Run every sweep cell, sequentially or over `jobs` processes.

    Returns:
        dict with success, message, sweep, results (one per cell, in cell order).
    """
    cells = cfg.cells()
    sweep = f"{cfg.experiment_name}-{cfg.config_hash()[:12]}"
    cell_ids = []
    if conn is not None:
        for cell in cells:
            cell_ids.append(add_sweep_cell(conn, sweep, cell.label, cell.config_hash()))
            update_sweep_cell(conn, cell_ids[-1], "in_progress")

    out = str(out_root) if out_root else None
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells, [out] * len(cells)))
    else:
        results = [_run_cell(cell, out) for cell in cells]

    for i, (cell, outcome) in enumerate(zip(cells, results)):
        if conn is None:
            continue
        if outcome["success"]:
            record_run(conn, cell, outcome)
            update_sweep_cell(conn, cell_ids[i], "completed", outcome["run_dir"], outcome["status"])
        else:
            update_sweep_cell(conn, cell_ids[i], "failed", message=outcome["message"])

    failed = [r for r in results if not r["success"]]
    diverged = [r for r in results if r.get("status") == "diverged"]
    return {
        "success": not failed,
        "message": f"{len(cells)} cell(s): {len(failed)} failed, {len(diverged)} diverged",
        "sweep": sweep,
        "results": results,
    }


# ─── Compare / figures ───────────────────────────────────────────


def _load_summary(run_dir: str) -> Optional[dict]:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def compare_runs(run_dirs: Sequence[str], out_csv: Optional[str] = None) -> dict:
    """Table of final CV loss, epochs and speedup for runs on the same task.

    The baseline is the first single-worker run in the set, otherwise the
    first run; `speedup` is relative to it. Diverged runs show "divergence"
    instead of a loss.
    """
    summaries = []
    for run_dir in run_dirs:
        summary = _load_summary(run_dir)
        if summary is None:
            return {"success": False, "message": f"No summary.json in {run_dir}", "rows": []}
        summaries.append((run_dir, summary))
    if not summaries:
        return {"success": False, "message": "No runs to compare", "rows": []}

    first = summaries[0][1]
    for run_dir, s in summaries[1:]:
        if s["data"] != first["data"] or s["model"] != first["model"]:
            return {"success": False, "message": f"{run_dir}: dataset/model spec differs from {summaries[0][0]}",
                    "rows": []}

    baseline = next((s for _, s in summaries if s["n_workers"] == 1), first)
    rows = []
    for run_dir, s in summaries:
        spe = s["seconds_per_epoch"]
        diverged = s["status"] == "diverged"
        rows.append({
            "run": Path(run_dir).name,
            "strategy": s["strategy"],
            "n_workers": s["n_workers"],
            "sync_period": s["sync_period"],
            "minibatch": s["minibatch"],
            "status": s["status"],
            "final_cv_loss": "divergence" if diverged else s["final_cv_loss"],
            "epochs": s["epochs"],
            "sim_time": s["sim_time"],
            "speedup": baseline["seconds_per_epoch"] / spe if spe else None,
            "speedup_vs_single": s["speedup"],
        })

    if out_csv:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=COMPARE_HEADER, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return {"success": True, "message": f"Compared {len(rows)} run(s)", "rows": rows, "csv": out_csv}


def reproduce_figures(run_dirs: Sequence[str], out_csv: str) -> dict:
    """Long-format learning-curve CSV (strategy, n_workers, epoch, cv_loss).

    Each row also carries the run's sync period and minibatch so the curves
    of a sync-period or minibatch sweep stay apart.

    Incomplete runs are skipped with a warning instead of failing the set.
    """
    warnings = []
    rows = []
    series = 0
    for run_dir in run_dirs:
        summary = _load_summary(run_dir)
        curve_path = Path(run_dir) / "learning_curve.csv"
        if summary is None or not curve_path.exists() or not (Path(run_dir) / "manifest.json").exists():
            warnings.append(f"{run_dir}: incomplete run, skipped")
            logger.warning("skipping incomplete run %s", run_dir)
            continue
        curve = read_curve_csv(curve_path)
        for point in curve:
            rows.append([
                summary["strategy"],
                summary["n_workers"],
                point.epoch,
                repr(point.cv_loss),
                summary["sync_period"],
                summary["minibatch"],
            ])
        series += 1

    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FIGURE_HEADER)
        writer.writerows(rows)
    return {
        "success": series > 0,
        "message": f"{series} series written to {out_csv}",
        "series": series,
        "rows": len(rows),
        "warnings": warnings,
    }


def fit_speedup(observations_csv: str, structure: str = "shared-ratio", report: Optional[str] = None) -> dict:
    try:
        observations = read_observations(observations_csv)
        fit = fit_model(observations, structure)
    except (OSError, ValueError) as e:
        return {"success": False, "message": str(e)}
    if report:
        write_fit_report(fit, observations, report)
    return {"success": True, "message": f"Fitted {len(observations)} observation(s)", "fit": fit.to_dict()}


# ─── CLI ─────────────────────────────────────────────────────────


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else os.environ.get("PSYN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _overrides(args) -> dict:
    return {"seed": args.seed, "output.dir": args.out}


def _open_registry(db_path: Optional[str], out: Optional[str]):
    if db_path is None and out:
        db_path = str(Path(out) / "psyn.db")
    conn = get_connection(db_path)
    init_db(conn)
    return conn


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Data-parallel SGD strategy lab")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--db", default=None, help="Registry path (default <out>/psyn.db)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "Run one experiment"), ("sweep", "Run every sweep cell")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="Experiment config file")
        p.add_argument("--out", default=None, help="Output root (default $PSYN_OUT)")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="Parallel sweep cells")

    p = sub.add_parser("compare", help="Compare finished runs")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--out", default=None, help="Write the table as CSV here")

    p = sub.add_parser("reproduce-figures", help="Learning-curve CSV for plotting")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--out", required=True, help="Output CSV")

    p = sub.add_parser("fit-speedup", help="Fit the speedup model to observations")
    p.add_argument("observations", help="CSV with n_workers,sync_period,minibatch,speedup")
    p.add_argument("--structure", choices=STRUCTURES, default="shared-ratio")
    p.add_argument("--report", default=None, help="Per-observation report CSV")

    p = sub.add_parser("verify", help="Check a run's artifacts against its manifest")
    p.add_argument("run", help="Run directory")

    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if args.command in ("run", "sweep"):
        try:
            cfg = load_config(args.config, _overrides(args))
        except ConfigError as e:
            print(f"❌ Config error: {e}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        conn = _open_registry(args.db, args.out)

        if args.command == "run":
            if cfg.is_sweep:
                print("❌ Config error: config declares sweep axes; use 'sweep'", file=sys.stderr)
                return EXIT_CONFIG_ERROR
            result = run_experiment(cfg, conn=conn)
            if not result["success"]:
                print(f"❌ {result['message']}", file=sys.stderr)
                return result["exit_code"]
            icon = "⚠️" if result["exit_code"] == EXIT_DIVERGED else "✅"
            print(f"{icon} {result['message']}", file=sys.stderr)
            print(result["run_dir"])
            return result["exit_code"]

        result = run_sweep(cfg, jobs=args.jobs, conn=conn)
        for outcome in result["results"]:
            if outcome["success"]:
                icon = "⚠️" if outcome["status"] == "diverged" else "✅"
                print(f"{icon} {outcome['message']}", file=sys.stderr)
                print(outcome["run_dir"])
            else:
                print(f"❌ {outcome['message']}", file=sys.stderr)
        print(f"📊 {result['message']}", file=sys.stderr)
        return EXIT_OK if result["success"] else EXIT_FAILURE

    if args.command == "compare":
        result = compare_runs(args.runs, args.out)
        if not result["success"]:
            print(f"❌ {result['message']}", file=sys.stderr)
            return EXIT_FAILURE
        if args.out:
            print(f"📄 Table written to {args.out}", file=sys.stderr)
        else:
            writer = csv.DictWriter(sys.stdout, fieldnames=COMPARE_HEADER, lineterminator="\n")
            writer.writeheader()
            writer.writerows(result["rows"])
        return EXIT_OK

    if args.command == "reproduce-figures":
        result = reproduce_figures(args.runs, args.out)
        for warning in result["warnings"]:
            print(f"⚠️ {warning}", file=sys.stderr)
        icon = "📈" if result["success"] else "❌"
        print(f"{icon} {result['message']}", file=sys.stderr)
        return EXIT_OK if result["success"] else EXIT_FAILURE

    if args.command == "fit-speedup":
        result = fit_speedup(args.observations, args.structure, args.report)
        if not result["success"]:
            print(f"❌ {result['message']}", file=sys.stderr)
            return EXIT_FAILURE
        print(json.dumps(result["fit"], indent=2))
        return EXIT_OK

    result = verify_manifest(args.run)
    icon = "✅" if result["success"] else "❌"
    print(f"{icon} {result['message']}", file=sys.stderr)
    for problem in result["problems"]:
        print(f"  - {problem}", file=sys.stderr)
    return EXIT_OK if result["success"] else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
