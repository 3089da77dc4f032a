"""Database introspection and rendering of the prompt-context block."""

from __future__ import annotations

import sqlite3
from dataclasses import dataclass, field

from .dataset import DbEntry

DEFAULT_SAMPLE_ROWS = 3
DEFAULT_CATEGORICAL_CAP = 300


class DbOpenError(RuntimeError):
    pass


class IntrospectionError(RuntimeError):
    def __init__(self, table: str, reason: str):
        super().__init__(f"table {table}: {reason}")
        self.table = table


@dataclass
class ColumnInfo:
    name: str
    decl_type: str
    primary_key: bool = False
    description: str = ""


@dataclass
class TableInfo:
    name: str
    create_sql: str
    columns: list[ColumnInfo]
    foreign_keys: list[str]
    sample_rows: list[list]


@dataclass
class DbSchemaContext:
    db_name: str
    tables: list[TableInfo]
    categorical_values: dict[tuple[str, str], list] = field(default_factory=dict)
    categorical_skipped: list[tuple[str, str]] = field(default_factory=list)
    notes: str = ""
    null_literal: str = "None"
    k_samples: int = DEFAULT_SAMPLE_ROWS


def introspect_schema(
    entry: DbEntry,
    k_samples: int = DEFAULT_SAMPLE_ROWS,
    categorical_cap: int = DEFAULT_CATEGORICAL_CAP,
) -> DbSchemaContext:
    """Collect tables, DDL, first-k sample rows, and categorical value lists."""
    if k_samples < 0:
        raise ValueError("k_samples must be >= 0")
    try:
        conn = entry.open_readonly()
    except sqlite3.Error as exc:
        raise DbOpenError(f"cannot open {entry.path}: {exc}") from None
    try:
        rows = conn.execute(
            "SELECT name, sql FROM sqlite_master"
            " WHERE type = 'table' AND name NOT LIKE 'sqlite_%'"
        ).fetchall()
        tables = []
        for name, create_sql in rows:
            try:
                cols = [
                    ColumnInfo(name=c[1], decl_type=c[2] or "", primary_key=bool(c[5]))
                    for c in conn.execute(f'PRAGMA table_info("{name}")')
                ]
                fks = [
                    f"{name}.{fk[3]} references {fk[2]}.{fk[4] or fk[3]}"
                    for fk in conn.execute(f'PRAGMA foreign_key_list("{name}")')
                ]
                sample = [
                    list(r)
                    for r in conn.execute(
                        f'SELECT * FROM "{name}" LIMIT ?', (k_samples,)
                    )
                ]
            except sqlite3.Error as exc:
                raise IntrospectionError(name, str(exc)) from None
            tables.append(
                TableInfo(
                    name=name,
                    create_sql=(create_sql or "").strip(),
                    columns=cols,
                    foreign_keys=fks,
                    sample_rows=sample,
                )
            )
        descriptions = {(c.table, c.column): c.description for c in entry.categorical}
        for table in tables:
            for col in table.columns:
                col.description = descriptions.get((table.name, col.name), "")
        cat_values: dict[tuple[str, str], list] = {}
        skipped: list[tuple[str, str]] = []
        for spec in entry.categorical:
            try:
                values = [
                    r[0]
                    for r in conn.execute(
                        f'SELECT DISTINCT "{spec.column}" FROM "{spec.table}"'
                        f' ORDER BY "{spec.column}" LIMIT ?',
                        (categorical_cap + 1,),
                    )
                ]
            except sqlite3.Error as exc:
                raise IntrospectionError(spec.table, str(exc)) from None
            if len(values) > categorical_cap:
                skipped.append((spec.table, spec.column))
            else:
                cat_values[(spec.table, spec.column)] = values
    finally:
        conn.close()
    return DbSchemaContext(
        db_name=entry.name,
        tables=tables,
        categorical_values=cat_values,
        categorical_skipped=skipped,
        notes=entry.notes,
        null_literal=entry.null_literal,
        k_samples=k_samples,
    )


def _render_cell(cell, null_literal: str) -> str:
    if cell is None:
        return null_literal
    if isinstance(cell, bytes):
        return cell.hex()
    return str(cell)


def render_rows(columns: list[str], rows: list[list], null_literal: str) -> str:
    """Aligned column rendering used inside the sample-row comment blocks."""
    grid = [columns] + [[_render_cell(c, null_literal) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in grid) for i in range(len(columns))]
    lines = [
        "  ".join(value.ljust(widths[i]) for i, value in enumerate(line)).rstrip()
        for line in grid
    ]
    return "\n".join(lines)


def render_context(ctx: DbSchemaContext) -> str:
    """Deterministic text block: per-table DDL, column glosses, sample rows,
    categorical value lists, then the registry notes verbatim."""
    parts: list[str] = []
    for table in ctx.tables:
        block = [table.create_sql if table.create_sql else f"-- table {table.name}"]
        glosses = [
            f"-- {table.name}.{col.name}: {col.description}"
            for col in table.columns
            if col.description
        ]
        block.extend(glosses)
        sample = table.sample_rows
        comment = [
            "/*",
            f"{ctx.k_samples} example rows:",
            f"SELECT * FROM {table.name} LIMIT {ctx.k_samples};",
        ]
        if sample:
            comment.append(
                render_rows([c.name for c in table.columns], sample, ctx.null_literal)
            )
        else:
            comment.append("(no rows)")
        comment.append("*/")
        block.append("\n".join(comment))
        parts.append("\n".join(block))
    cat_lines = []
    for (table, column), values in sorted(ctx.categorical_values.items()):
        rendered = ", ".join(_render_cell(v, ctx.null_literal) for v in values)
        cat_lines.append(f"Possible values for {table}.{column}: {rendered}")
    for table, column in sorted(ctx.categorical_skipped):
        cat_lines.append(
            f"Values for {table}.{column}: too many distinct values to list"
        )
    if cat_lines:
        parts.append("\n".join(cat_lines))
    if ctx.notes.strip():
        parts.append(ctx.notes.strip())
    return "\n\n".join(parts) + "\n"
