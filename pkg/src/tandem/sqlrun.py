"""Read-only SQL execution with timeout, result capture, and the repair loop."""

from __future__ import annotations

import logging
import sqlite3
import threading
import time
from dataclasses import dataclass, field

from .dataset import DbEntry
from .llm import Backend, LlmRequest
from .prompts import NoBlockFound, PromptSettings, extract_fenced, render_prompt

log = logging.getLogger(__name__)

DEFAULT_SQL_TIMEOUT = 120.0
DEFAULT_CELL_CAP = 2_000_000
DEFAULT_MAX_REPAIRS = 3
_FETCH_CHUNK = 1024


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[list]

    @property
    def row_count(self) -> int:
        return len(self.rows)


@dataclass
class SqlOutcome:
    kind: str  # "ok" | "error" | "timeout"
    table: ResultTable | None = None
    message: str = ""

    @classmethod
    def ok(cls, table: ResultTable) -> "SqlOutcome":
        return cls(kind="ok", table=table)

    @classmethod
    def error(cls, message: str) -> "SqlOutcome":
        return cls(kind="error", message=message)

    @classmethod
    def timeout(cls, message: str = "query exceeded the time limit") -> "SqlOutcome":
        return cls(kind="timeout", message=message)


@dataclass
class SqlAttempt:
    query: str
    outcome: SqlOutcome


@dataclass
class SqlExecution:
    step_text: str
    attempts: list[SqlAttempt] = field(default_factory=list)

    @property
    def final_ok(self) -> bool:
        return bool(self.attempts) and self.attempts[-1].outcome.kind == "ok"

    @property
    def final_table(self) -> ResultTable | None:
        return self.attempts[-1].outcome.table if self.final_ok else None


def _cell_value(cell):
    if isinstance(cell, bytes):
        return cell.hex()
    return cell


def execute_sql(
    entry_or_conn: DbEntry | sqlite3.Connection,
    query: str,
    timeout: float = DEFAULT_SQL_TIMEOUT,
    cell_cap: int = DEFAULT_CELL_CAP,
) -> SqlOutcome:
    """Run one statement read-only; interrupt past the deadline.

    Write statements fail on the read-only connection and surface as errors;
    results above cell_cap cells are an error so the repair loop can react.
    """
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    own_conn = isinstance(entry_or_conn, DbEntry)
    conn = entry_or_conn.open_readonly() if own_conn else entry_or_conn
    timed_out = threading.Event()

    def interrupt():
        timed_out.set()
        conn.interrupt()

    watchdog = threading.Timer(timeout, interrupt)
    watchdog.daemon = True
    watchdog.start()
    try:
        cursor = conn.execute(query)
        columns = [d[0] for d in cursor.description] if cursor.description else []
        rows: list[list] = []
        cells = 0
        while True:
            chunk = cursor.fetchmany(_FETCH_CHUNK)
            if not chunk:
                break
            for raw in chunk:
                rows.append([_cell_value(c) for c in raw])
            cells = len(rows) * max(len(columns), 1)
            if cells > cell_cap:
                return SqlOutcome.error(
                    f"result too large (over {cell_cap} cells);"
                    " add filtering or aggregation"
                )
        return SqlOutcome.ok(ResultTable(columns=columns, rows=rows))
    except sqlite3.OperationalError as exc:
        if timed_out.is_set() and "interrupt" in str(exc).lower():
            return SqlOutcome.timeout()
        return SqlOutcome.error(str(exc))
    except (sqlite3.Error, sqlite3.Warning) as exc:
        return SqlOutcome.error(str(exc))
    finally:
        watchdog.cancel()
        if own_conn:
            conn.close()


def run_sql_step_with_repair(
    step_text: str,
    entry: DbEntry,
    settings: PromptSettings,
    backend: Backend,
    max_repairs: int = DEFAULT_MAX_REPAIRS,
    timeout: float = DEFAULT_SQL_TIMEOUT,
    cell_cap: int = DEFAULT_CELL_CAP,
) -> SqlExecution:
    """One Text2SQL call, then up to max_repairs corrective calls."""
    execution = SqlExecution(step_text=step_text)
    artifact = ""
    error_text = ""
    for attempt_no in range(1 + max_repairs):
        if attempt_no == 0:
            prompt = render_prompt(
                "text2sql",
                settings.schema_text,
                step_text,
                settings.extras_for("text2sql"),
            )
            tag = "text2sql"
        else:
            prompt = render_prompt(
                "repair_sql",
                settings.schema_text,
                step_text,
                settings.extras_for("repair_sql", artifact=artifact, error=error_text),
            )
            tag = "repair_sql"
        response = backend.complete(LlmRequest.user(prompt, tag=tag))
        try:
            query = extract_fenced(response.text, "sql")
        except NoBlockFound as exc:
            artifact = response.text
            error_text = str(exc)
            execution.attempts.append(
                SqlAttempt(query="", outcome=SqlOutcome.error(error_text))
            )
            continue
        outcome = execute_sql(entry, query, timeout=timeout, cell_cap=cell_cap)
        execution.attempts.append(SqlAttempt(query=query, outcome=outcome))
        if outcome.kind == "ok":
            break
        artifact = query
        error_text = outcome.message
    return execution


@dataclass
class TableShape:
    columns: list[tuple[str, str]]  # (name, dtype label)
    row_count: int
    n_sample: int
    text: str


def _dtype_label(cells: list) -> str:
    ints = floats = texts = 0
    for cell in cells:
        if cell is None:
            continue
        if isinstance(cell, bool):
            ints += 1
        elif isinstance(cell, int):
            ints += 1
        elif isinstance(cell, float):
            floats += 1
        else:
            texts += 1
    best = max(ints, floats, texts)
    if best == 0:
        return "object"
    # Ties resolve toward text ("object"), then float over int.
    if texts == best:
        return "object"
    if floats == best:
        return "float64"
    return "int64"


def shape_of(table: ResultTable, n_sample: int = 3) -> TableShape:
    """Pandas-style head/tail preview plus dtype labels and row count."""
    n = table.row_count
    columns = [
        (name, _dtype_label([row[i] for row in table.rows]))
        for i, name in enumerate(table.columns)
    ]
    if n > 2 * n_sample:
        shown = [(i, table.rows[i]) for i in range(n_sample)]
        shown += [(None, None)]  # elision marker
        shown += [(i, table.rows[i]) for i in range(n - n_sample, n)]
        sampled = 2 * n_sample
    else:
        shown = [(i, row) for i, row in enumerate(table.rows)]
        sampled = n
    body_rows: list[list[str]] = []
    for idx, row in shown:
        if idx is None:
            body_rows.append(["..."] + ["..."] * len(table.columns))
        else:
            body_rows.append(
                [str(idx)] + ["None" if c is None else str(c) for c in row]
            )
    grid = [[""] + [name for name, _ in columns]] + body_rows
    widths = [max(len(r[i]) for r in grid) for i in range(len(grid[0]))]
    lines = [
        "  ".join(value.rjust(widths[i]) for i, value in enumerate(line)).rstrip()
        for line in grid
    ]
    if n == 0:
        lines.append("(empty)")
    dtype_line = "dtypes: " + ", ".join(f"{name}: {dt}" for name, dt in columns)
    footer = f"[{n} rows x {len(table.columns)} columns]"
    text = "\n".join(lines + [footer, dtype_line])
    return TableShape(columns=columns, row_count=n, n_sample=sampled, text=text)
