import hashlib
import json
import sqlite3
import subprocess
import sys
import time
from pathlib import Path

import pytest

# Frozen fixture behind the correlation conformance check: star ratings with
# delivery times that fall as the rating rises, plus a deterministic wiggle.
PEARSON_SCORES = [(i % 5) + 1 for i in range(40)]
PEARSON_DELIVERY = [
    round(12 - 1.6 * ((i % 5) + 1) + ((i * 7) % 11) / 10.0, 2) for i in range(40)
]


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def file_sha256():
    return _sha256


@pytest.fixture
def run_runner():
    """Run one job document through the runner process.

    Returns (completed process, parsed result document or None, elapsed seconds).
    """

    def _run(job_doc: dict, scratch: Path, name: str = "job_0.json", env=None):
        job_path = scratch / name
        job_path.write_text(json.dumps(job_doc), encoding="utf-8")
        started = time.monotonic()
        proc = subprocess.run(
            [sys.executable, "-m", "tandem_runner", str(job_path)],
            capture_output=True,
            text=True,
            timeout=120,
            env=env,
        )
        elapsed = time.monotonic() - started
        result_path = job_path.with_name(job_path.stem + ".result.json")
        result = None
        if result_path.exists():
            result = json.loads(result_path.read_text(encoding="utf-8"))
        return proc, result, elapsed

    return _run


@pytest.fixture
def write_payload():
    """Write a table payload: columns is a list of (name, dtype) pairs."""

    def _write(path: Path, columns, rows):
        doc = {
            "columns": [{"name": n, "dtype": d} for n, d in columns],
            "rows": rows,
        }
        path.write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def make_db():
    """Create a small sqlite database and stage it read-only like the client."""

    def _make(scratch: Path, name: str = "data.sqlite") -> Path:
        db_path = scratch / name
        con = sqlite3.connect(db_path)
        con.execute("CREATE TABLE t (id INTEGER PRIMARY KEY, v INTEGER)")
        con.executemany("INSERT INTO t VALUES (?, ?)", [(1, 10), (2, 20), (3, 30)])
        con.commit()
        con.close()
        db_path.chmod(0o444)
        return db_path

    return _make


@pytest.fixture
def pearson_db():
    """Build the correlation fixture; returns (db path, scores, delivery)."""

    def _make(scratch: Path):
        db_path = scratch / "reviews.sqlite"
        con = sqlite3.connect(db_path)
        con.execute("CREATE TABLE reviews (score REAL, delivery_days REAL)")
        con.executemany(
            "INSERT INTO reviews VALUES (?, ?)",
            list(zip(PEARSON_SCORES, PEARSON_DELIVERY)),
        )
        con.commit()
        con.close()
        db_path.chmod(0o444)
        return db_path, list(PEARSON_SCORES), list(PEARSON_DELIVERY)

    return _make
