#!/usr/bin/env python3
"""
SQLite run registry for the parallel-SGD lab.

Every experiment run, the artifacts it wrote (with SHA-256 checksums),
the cells of each sweep and a small event log live in one database file,
by default <output root>/psyn.db.

Tables:
- runs:         one row per run directory (config hash, status, timings)
- artifacts:    files written by a run, with checksums
- sweep_cells:  cells of a sweep, pending -> in_progress -> completed/failed
- run_log:      activity log for auditing/debugging

Environment:
    PSYN_DB    database path override
    PSYN_OUT   output root (the default database lives there)

Usage:
    from db import get_connection, init_db, register_run

    conn = get_connection()
    init_db(conn)

CLI:
    python3 db.py --init          # initialize the database
    python3 db.py --status        # show table row counts
    python3 db.py --runs          # list recent runs
"""

import argparse
import json
import os
import sqlite3
from pathlib import Path
from typing import Optional


# ─── Default DB path ─────────────────────────────────────────────


def default_db_path() -> str:
    if os.environ.get("PSYN_DB"):
        return os.environ["PSYN_DB"]
    out = os.environ.get("PSYN_OUT", str(Path.home() / ".psyn" / "runs"))
    return str(Path(out).expanduser() / "psyn.db")


# ─── Connection ──────────────────────────────────────────────────


def get_connection(db_path: Optional[str] = None) -> sqlite3.Connection:
    """Open a SQLite connection with WAL mode and busy timeout.

    Args:
        db_path: Path to the database file. Defaults to default_db_path().
                 Use ":memory:" for testing.
    """
    if db_path is None:
        db_path = default_db_path()

    if db_path != ":memory:":
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)

    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA journal_mode=WAL")
    conn.execute("PRAGMA busy_timeout=5000")
    conn.execute("PRAGMA foreign_keys=ON")
    return conn


# ─── Schema ──────────────────────────────────────────────────────

SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_dir TEXT UNIQUE NOT NULL,
    name TEXT NOT NULL,
    config_hash TEXT NOT NULL,
    strategy TEXT NOT NULL,
    n_workers INTEGER NOT NULL,
    sync_period INTEGER NOT NULL,
    minibatch INTEGER NOT NULL,
    status TEXT DEFAULT 'running',
    final_cv_loss REAL,
    epochs INTEGER,
    sim_time REAL,
    speedup REAL,
    started_at TEXT DEFAULT (datetime('now')),
    finished_at TEXT
);

CREATE TABLE IF NOT EXISTS artifacts (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id INTEGER NOT NULL,
    name TEXT NOT NULL,
    path TEXT NOT NULL,
    sha256 TEXT NOT NULL,
    bytes INTEGER NOT NULL,
    UNIQUE(run_id, name),
    FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
);

CREATE TABLE IF NOT EXISTS sweep_cells (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    sweep TEXT NOT NULL,
    label TEXT NOT NULL,
    config_hash TEXT NOT NULL,
    status TEXT DEFAULT 'pending',
    run_dir TEXT,
    message TEXT,
    created_at TEXT DEFAULT (datetime('now')),
    completed_at TEXT,
    UNIQUE(sweep, label)
);

CREATE TABLE IF NOT EXISTS run_log (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_dir TEXT,
    event_type TEXT NOT NULL,
    summary TEXT,
    created_at TEXT DEFAULT (datetime('now')),
    metadata TEXT
);
"""

TABLES = ["runs", "artifacts", "sweep_cells", "run_log"]
CELL_STATUSES = ("pending", "in_progress", "completed", "failed")


def init_db(conn: sqlite3.Connection) -> None:
    """Create all tables if they don't exist. Idempotent."""
    conn.executescript(SCHEMA_SQL)


# ─── Runs ────────────────────────────────────────────────────────


def register_run(
    conn: sqlite3.Connection,
    run_dir: str,
    name: str,
    config_hash: str,
    strategy: str,
    n_workers: int,
    sync_period: int,
    minibatch: int,
) -> int:
    """Insert (or reset) a run row. Returns the run ID.

    Re-running into the same directory replaces the old row and its artifacts.
    """
    conn.execute("DELETE FROM runs WHERE run_dir = ?", (run_dir,))
    cursor = conn.execute(
        """INSERT INTO runs
           (run_dir, name, config_hash, strategy, n_workers, sync_period, minibatch)
           VALUES (?, ?, ?, ?, ?, ?, ?)""",
        (run_dir, name, config_hash, strategy, n_workers, sync_period, minibatch),
    )
    conn.commit()
    return cursor.lastrowid


def finish_run(
    conn: sqlite3.Connection,
    run_id: int,
    status: str,
    final_cv_loss: Optional[float] = None,
    epochs: Optional[int] = None,
    sim_time: Optional[float] = None,
    speedup: Optional[float] = None,
) -> bool:
    """Record a run's outcome. Returns True if the run exists."""
    cursor = conn.execute(
        """UPDATE runs SET status = ?, final_cv_loss = ?, epochs = ?, sim_time = ?,
                  speedup = ?, finished_at = datetime('now')
           WHERE id = ?""",
        (status, final_cv_loss, epochs, sim_time, speedup, run_id),
    )
    conn.commit()
    return cursor.rowcount > 0


def get_run(conn: sqlite3.Connection, run_dir: str) -> Optional[dict]:
    row = conn.execute("SELECT * FROM runs WHERE run_dir = ?", (run_dir,)).fetchone()
    return dict(row) if row else None


def list_runs(
    conn: sqlite3.Connection,
    status: Optional[str] = None,
    strategy: Optional[str] = None,
    limit: int = 50,
) -> list[dict]:
    """Recent runs, newest first, with optional filters."""
    query = "SELECT * FROM runs WHERE 1=1"
    params: list = []
    if status:
        query += " AND status = ?"
        params.append(status)
    if strategy:
        query += " AND strategy = ?"
        params.append(strategy)
    query += " ORDER BY id DESC LIMIT ?"
    params.append(limit)
    return [dict(r) for r in conn.execute(query, params).fetchall()]


# ─── Artifacts ───────────────────────────────────────────────────


def add_artifact(
    conn: sqlite3.Connection,
    run_id: int,
    name: str,
    path: str,
    sha256: str,
    size: int,
) -> int:
    cursor = conn.execute(
        """INSERT OR REPLACE INTO artifacts (run_id, name, path, sha256, bytes)
           VALUES (?, ?, ?, ?, ?)""",
        (run_id, name, path, sha256, size),
    )
    conn.commit()
    return cursor.lastrowid


def list_artifacts(conn: sqlite3.Connection, run_id: int) -> list[dict]:
    rows = conn.execute(
        "SELECT name, path, sha256, bytes FROM artifacts WHERE run_id = ? ORDER BY name",
        (run_id,),
    ).fetchall()
    return [dict(r) for r in rows]


# ─── Sweep cells ─────────────────────────────────────────────────


def add_sweep_cell(conn: sqlite3.Connection, sweep: str, label: str, config_hash: str) -> int:
    """Insert a pending cell; an existing (sweep, label) is reset to pending."""
    conn.execute(
        """INSERT INTO sweep_cells (sweep, label, config_hash) VALUES (?, ?, ?)
           ON CONFLICT(sweep, label) DO UPDATE SET
               config_hash = excluded.config_hash, status = 'pending',
               run_dir = NULL, message = NULL, completed_at = NULL""",
        (sweep, label, config_hash),
    )
    conn.commit()
    row = conn.execute(
        "SELECT id FROM sweep_cells WHERE sweep = ? AND label = ?", (sweep, label)
    ).fetchone()
    return row["id"]


def update_sweep_cell(
    conn: sqlite3.Connection,
    cell_id: int,
    status: str,
    run_dir: Optional[str] = None,
    message: Optional[str] = None,
) -> bool:
    """Move a cell to a new status. completed/failed stamp completed_at.

    Raises:
        ValueError: unknown status.
    """
    if status not in CELL_STATUSES:
        raise ValueError(f"Invalid status '{status}'. Valid: {', '.join(CELL_STATUSES)}")
    done = status in ("completed", "failed")
    cursor = conn.execute(
        f"""UPDATE sweep_cells SET status = ?, run_dir = COALESCE(?, run_dir), message = ?
            {", completed_at = datetime('now')" if done else ""}
            WHERE id = ?""",
        (status, run_dir, message, cell_id),
    )
    conn.commit()
    return cursor.rowcount > 0


def get_sweep_cells(conn: sqlite3.Connection, sweep: str, status: Optional[str] = None) -> list[dict]:
    query = "SELECT * FROM sweep_cells WHERE sweep = ?"
    params: list = [sweep]
    if status:
        query += " AND status = ?"
        params.append(status)
    query += " ORDER BY id"
    return [dict(r) for r in conn.execute(query, params).fetchall()]


# ─── Run log ─────────────────────────────────────────────────────


def log_event(
    conn: sqlite3.Connection,
    event_type: str,
    run_dir: Optional[str] = None,
    summary: Optional[str] = None,
    metadata: Optional[dict] = None,
) -> int:
    """Log an event. Returns the new row ID."""
    cursor = conn.execute(
        """INSERT INTO run_log (run_dir, event_type, summary, metadata)
           VALUES (?, ?, ?, ?)""",
        (run_dir, event_type, summary, json.dumps(metadata) if metadata else None),
    )
    conn.commit()
    return cursor.lastrowid


def get_recent_events(
    conn: sqlite3.Connection,
    limit: int = 20,
    run_dir: Optional[str] = None,
    event_type: Optional[str] = None,
) -> list[dict]:
    query = "SELECT * FROM run_log WHERE 1=1"
    params: list = []
    if run_dir:
        query += " AND run_dir = ?"
        params.append(run_dir)
    if event_type:
        query += " AND event_type = ?"
        params.append(event_type)
    query += " ORDER BY id DESC LIMIT ?"
    params.append(limit)

    results = []
    for row in conn.execute(query, params).fetchall():
        entry = dict(row)
        if entry.get("metadata"):
            try:
                entry["metadata"] = json.loads(entry["metadata"])
            except (json.JSONDecodeError, TypeError):
                pass
        results.append(entry)
    return results


# ─── CLI Interface ────────────────────────────────────────────────


def main():
    parser = argparse.ArgumentParser(description="Run registry management")
    parser.add_argument("--init", action="store_true", help="Initialize the database (create tables)")
    parser.add_argument("--status", action="store_true", help="Show table row counts")
    parser.add_argument("--runs", action="store_true", help="List recent runs")
    parser.add_argument("--db", default=None, help="Path to database file")
    args = parser.parse_args()

    db_path = args.db or default_db_path()
    conn = get_connection(db_path)

    if args.init:
        init_db(conn)
        print(f"✓ Database initialized at {db_path}")
        return

    if args.status:
        init_db(conn)
        print(f"📊 Database: {db_path}")
        for table in TABLES:
            count = conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]
            print(f"  {table}: {count} rows")
        return

    if args.runs:
        init_db(conn)
        for run in list_runs(conn):
            loss = "-" if run["final_cv_loss"] is None else f"{run['final_cv_loss']:.6g}"
            print(f"  [{run['status']}] {run['name']} {run['strategy']} N={run['n_workers']} "
                  f"tau={run['sync_period']} cv={loss}  {run['run_dir']}")
        return

    parser.print_help()


if __name__ == "__main__":
    main()
