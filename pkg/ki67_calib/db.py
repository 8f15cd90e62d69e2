"""Run registry (SQLite).

All SQL statements live in this module. The experiment runner and the
`report` command use the functions below instead of writing SQL directly.

The registry path can be overridden with the KI67_DB_PATH environment
variable; otherwise it is `registry.db` inside KI67_CACHE_DIR.
"""

from __future__ import annotations

import os
import sqlite3
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .models.manifest import ArtifactRecord, RunManifest, now_utc

DEFAULT_CACHE_DIR = ".ki67_cache"

# ---------------------------
# Connection helpers
# ---------------------------

def get_cache_dir() -> Path:
    """Dataset cache root: KI67_CACHE_DIR or ./.ki67_cache."""
    return Path(os.environ.get("KI67_CACHE_DIR", str(Path.cwd() / DEFAULT_CACHE_DIR))).expanduser()


def get_db_path() -> str:
    return os.environ.get("KI67_DB_PATH", str(get_cache_dir() / "registry.db"))


@contextmanager
def get_connection() -> sqlite3.Connection:
    p = Path(get_db_path()).expanduser()

    # If KI67_DB_PATH accidentally points to a directory, fail clearly.
    if p.exists() and p.is_dir():
        raise sqlite3.OperationalError(f"Database path points to a directory: {p}")

    p.resolve().parent.mkdir(parents=True, exist_ok=True)

    conn = sqlite3.connect(str(p))
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA foreign_keys = ON;")
    try:
        yield conn
    finally:
        conn.close()


# ---------------------------
# Schema
# ---------------------------

def create_tables() -> None:
    with get_connection() as conn:
        cur = conn.cursor()
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                config_hash TEXT NOT NULL,
                root_seed INTEGER NOT NULL,
                tool_version TEXT NOT NULL,
                started_at TEXT NOT NULL,
                finished_at TEXT,
                status TEXT NOT NULL DEFAULT 'running'
            )
            """
        )
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS artifacts (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL REFERENCES runs(run_id) ON DELETE CASCADE,
                path TEXT NOT NULL,
                sha256 TEXT NOT NULL,
                kind TEXT NOT NULL,
                UNIQUE (run_id, path)
            )
            """
        )
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL REFERENCES runs(run_id) ON DELETE CASCADE,
                cell_id TEXT NOT NULL,
                metric TEXT NOT NULL,
                value REAL,
                UNIQUE (run_id, cell_id, metric)
            )
            """
        )
        conn.commit()


# ---------------------------
# Runs
# ---------------------------

def insert_run(manifest: RunManifest) -> None:
    with get_connection() as conn:
        cur = conn.cursor()
        cur.execute(
            """
            INSERT OR REPLACE INTO runs (run_id, config_hash, root_seed, tool_version, started_at, finished_at, status)
            VALUES (?, ?, ?, ?, ?, NULL, 'running')
            """,
            (
                manifest.run_id,
                manifest.config_hash,
                int(manifest.root_seed),
                manifest.tool_version,
                manifest.started_at.isoformat(),
            ),
        )
        conn.commit()


def finish_run(run_id: str, status: str, finished_at_iso: Optional[str] = None) -> None:
    with get_connection() as conn:
        cur = conn.cursor()
        cur.execute(
            "UPDATE runs SET finished_at = ?, status = ? WHERE run_id = ?",
            (finished_at_iso or now_utc().isoformat(), status, run_id),
        )
        conn.commit()


def get_run(run_id: str) -> Optional[Dict[str, Any]]:
    with get_connection() as conn:
        cur = conn.cursor()
        cur.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
        row = cur.fetchone()
        return dict(row) if row else None


def list_runs() -> List[Dict[str, Any]]:
    with get_connection() as conn:
        cur = conn.cursor()
        cur.execute("SELECT * FROM runs ORDER BY started_at ASC")
        return [dict(r) for r in cur.fetchall()]


# ---------------------------
# Artifacts / metrics
# ---------------------------

def insert_artifacts(run_id: str, records: Iterable[ArtifactRecord]) -> int:
    rows = [(run_id, r.path, r.sha256, r.kind) for r in records]
    with get_connection() as conn:
        cur = conn.cursor()
        cur.executemany(
            "INSERT OR REPLACE INTO artifacts (run_id, path, sha256, kind) VALUES (?, ?, ?, ?)",
            rows,
        )
        conn.commit()
        return len(rows)


def insert_metrics(run_id: str, values: Iterable[Tuple[str, str, Optional[float]]]) -> int:
    """Rows of (cell_id, metric, value); NaN is stored as NULL."""
    rows = []
    for cell_id, metric, value in values:
        v = None if value is None or value != value else float(value)
        rows.append((run_id, cell_id, metric, v))
    with get_connection() as conn:
        cur = conn.cursor()
        cur.executemany(
            "INSERT OR REPLACE INTO metrics (run_id, cell_id, metric, value) VALUES (?, ?, ?, ?)",
            rows,
        )
        conn.commit()
        return len(rows)


def list_metrics(run_id: str) -> List[Dict[str, Any]]:
    with get_connection() as conn:
        cur = conn.cursor()
        cur.execute(
            "SELECT cell_id, metric, value FROM metrics WHERE run_id = ? ORDER BY cell_id ASC, metric ASC",
            (run_id,),
        )
        return [dict(r) for r in cur.fetchall()]
