"""Run ledger: which runs happened and which stages each one executed or reused."""

import sqlite3
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator


def init_schema(db_path: str) -> None:
    """Create the ledger tables if they don't exist. Safe to call repeatedly."""
    db_file = Path(db_path)
    db_file.parent.mkdir(parents=True, exist_ok=True)

    with connection(db_path) as conn:
        schema_file = Path(__file__).parent / "schema.sql"
        conn.executescript(schema_file.read_text())


@contextmanager
def connection(db_path: str) -> Iterator[sqlite3.Connection]:
    """Yield a WAL-mode connection that commits on clean exit and rolls back on error."""
    conn = None
    try:
        try:
            conn = sqlite3.connect(db_path, timeout=30.0)
            conn.execute("PRAGMA journal_mode=WAL;")
            conn.row_factory = sqlite3.Row
        except (sqlite3.Error, ValueError) as e:
            raise sqlite3.Error(f"Failed to connect to ledger at {db_path}: {e}")
        yield conn
        conn.commit()
    except Exception:
        if conn:
            conn.rollback()
        raise
    finally:
        if conn:
            conn.close()


def record_run_start(db_path: str, run_id: str, system: str, dataset: str) -> None:
    with connection(db_path) as conn:
        conn.execute(
            "INSERT INTO runs (run_id, system, dataset, status) VALUES (?, ?, ?, 'running')",
            (run_id, system, dataset),
        )


def record_run_end(
    db_path: str,
    run_id: str,
    status: str,
    metrics_path: str | None = None,
    error: str | None = None,
) -> None:
    with connection(db_path) as conn:
        conn.execute(
            "UPDATE runs SET status = ?, metrics_path = ?, error = ?, finished_at = CURRENT_TIMESTAMP"
            " WHERE run_id = ?",
            (status, metrics_path, error, run_id),
        )


def record_stage(
    db_path: str,
    run_id: str,
    stage_name: str,
    digest: str,
    decision: str,
    status: str,
    seconds: float | None = None,
) -> None:
    with connection(db_path) as conn:
        conn.execute(
            "INSERT INTO stage_runs (run_id, stage_name, digest, decision, status, seconds)"
            " VALUES (?, ?, ?, ?, ?, ?)",
            (run_id, stage_name, digest, decision, status, seconds),
        )


def get_run(db_path: str, run_id: str) -> dict | None:
    with connection(db_path) as conn:
        row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
    return dict(row) if row else None


def stage_log(db_path: str, run_id: str) -> list[dict]:
    """Stage records of one run in execution order."""
    with connection(db_path) as conn:
        rows = conn.execute(
            "SELECT stage_name, digest, decision, status, seconds FROM stage_runs"
            " WHERE run_id = ? ORDER BY id",
            (run_id,),
        ).fetchall()
    return [dict(r) for r in rows]
