"""
SQLite store for run bookkeeping and cached NtD matrices.
"""

import os
import sqlite3
import uuid
from datetime import datetime
from typing import Dict, List, Optional

from dotenv import load_dotenv

load_dotenv()


class RunStore:
    def __init__(self, db_path: str = "./data/elastoscan.db"):
        """Open (and create if needed) the store at db_path."""
        directory = os.path.dirname(db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        self.db_path = db_path
        self.conn = sqlite3.connect(db_path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row
        self.create_tables()

    def create_tables(self):
        cursor = self.conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                command TEXT NOT NULL,
                config_digest TEXT NOT NULL,
                status TEXT NOT NULL DEFAULT 'running',
                report_path TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        # payload holds the matrix in the elastoscan-ntd text format
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS ntd_cache (
                config_digest TEXT NOT NULL,
                omega REAL NOT NULL,
                tag TEXT NOT NULL,
                basis_size INTEGER NOT NULL,
                payload TEXT NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                PRIMARY KEY (config_digest, omega, tag)
            )
        """)

        self.conn.commit()

    # ============ RUNS ============

    def start_run(self, command: str, config_digest: str) -> str:
        run_id = str(uuid.uuid4())
        self.conn.execute(
            "INSERT INTO runs (run_id, command, config_digest, created_at) VALUES (?, ?, ?, ?)",
            (run_id, command, config_digest, datetime.now().isoformat(timespec='seconds'))
        )
        self.conn.commit()
        return run_id

    def finish_run(self, run_id: str, status: str, report_path: Optional[str] = None):
        self.conn.execute(
            "UPDATE runs SET status = ?, report_path = ? WHERE run_id = ?",
            (status, report_path, run_id)
        )
        self.conn.commit()

    def get_run(self, run_id: str) -> Optional[Dict]:
        row = self.conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        return dict(row) if row else None

    def list_runs(self, config_digest: Optional[str] = None) -> List[Dict]:
        if config_digest is None:
            rows = self.conn.execute("SELECT * FROM runs ORDER BY created_at, run_id").fetchall()
        else:
            rows = self.conn.execute(
                "SELECT * FROM runs WHERE config_digest = ? ORDER BY created_at, run_id", (config_digest,)
            ).fetchall()
        return [dict(r) for r in rows]

    # ============ NTD CACHE ============

    def get_ntd(self, config_digest: str, omega: float, tag: str) -> Optional[str]:
        row = self.conn.execute(
            "SELECT payload FROM ntd_cache WHERE config_digest = ? AND omega = ? AND tag = ?",
            (config_digest, omega, tag)
        ).fetchone()
        return row['payload'] if row else None

    def put_ntd(self, config_digest: str, omega: float, tag: str, basis_size: int, payload: str):
        self.conn.execute("""
            INSERT OR REPLACE INTO ntd_cache (config_digest, omega, tag, basis_size, payload)
            VALUES (?, ?, ?, ?, ?)
        """, (config_digest, omega, tag, basis_size, payload))
        self.conn.commit()

    def clear_all_data(self):
        """Empty both tables (useful for testing)."""
        for table in ('ntd_cache', 'runs'):
            self.conn.execute(f"DELETE FROM {table}")
        self.conn.commit()

    def close(self):
        self.conn.close()


_store_instance = None


def get_store() -> RunStore:
    """Process-wide store at ELASTOSCAN_DB_PATH."""
    global _store_instance
    if _store_instance is None:
        _store_instance = RunStore(os.getenv('ELASTOSCAN_DB_PATH', './data/elastoscan.db'))
    return _store_instance


def reset_store():
    global _store_instance
    if _store_instance is not None:
        _store_instance.close()
    _store_instance = None
