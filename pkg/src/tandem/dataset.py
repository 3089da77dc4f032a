"""Question sets and the registry of databases they run against."""

from __future__ import annotations

import json
import sqlite3
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

from .answers import AnswerSet, ParseError


class FormatError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(ValueError):
    def __init__(self, question_id: str):
        super().__init__(f"duplicate question id: {question_id}")
        self.question_id = question_id


# The tag vocabulary used by the reference question set.  Tags are free
# strings; this list is documentation, not validation.
CATEGORY_VOCABULARY = [
    "Stat./Math. Operations",
    "Analytics over Non-entries in Database",
    "Nested Queries",
    "String Manipulation",
    "Calculations over Aggregate Analytics",
    "Complex Columns",
    "Temporal Reasoning",
    "Complex Filtering",
    "Unit Conversions",
    "Scenario Understanding",
    "Time Series Analysis",
    "Commonsense Knowledge",
]


@dataclass
class Question:
    id: str
    db_id: str
    text: str
    gold: AnswerSet
    categories: list[str] = field(default_factory=list)
    reference_code: str | None = None


def load_dataset(path: str | Path) -> list[Question]:
    """Read a JSONL question file.

    Each line carries id, db_id, question, answer (array-of-arrays answer
    JSON), optional categories, and optional reference_code.
    """
    questions: list[Question] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line, parse_float=Decimal)
            except json.JSONDecodeError as exc:
                raise FormatError(line_no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(doc, dict):
                raise FormatError(line_no, "line is not a JSON object")
            for key in ("id", "db_id", "question", "answer"):
                if key not in doc:
                    raise FormatError(line_no, f"missing field: {key}")
            qid = str(doc["id"])
            if qid in seen:
                raise DuplicateId(qid)
            seen.add(qid)
            try:
                gold = AnswerSet.from_json_obj(doc["answer"])
            except (ParseError, ValueError) as exc:
                raise FormatError(line_no, f"bad answer: {exc}") from None
            categories = doc.get("categories") or []
            if not isinstance(categories, list):
                raise FormatError(line_no, "categories must be an array")
            questions.append(
                Question(
                    id=qid,
                    db_id=str(doc["db_id"]),
                    text=str(doc["question"]),
                    gold=gold,
                    categories=[str(c) for c in categories],
                    reference_code=doc.get("reference_code"),
                )
            )
    return questions


def save_dataset(questions: list[Question], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            doc = {
                "id": q.id,
                "db_id": q.db_id,
                "question": q.text,
                "answer": q.gold.to_json_obj(),
                "categories": q.categories,
            }
            if q.reference_code is not None:
                doc["reference_code"] = q.reference_code
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")


def category_histogram(questions: list[Question]) -> dict[str, int]:
    """Count questions per tag; a multi-tagged question counts in each."""
    counts: Counter[str] = Counter()
    for q in questions:
        for tag in q.categories:
            counts[tag] += 1
    return dict(counts)


@dataclass
class CategoricalColumn:
    table: str
    column: str
    description: str = ""


@dataclass
class DbEntry:
    """One registered database plus its prompt-time metadata."""

    db_id: str
    path: Path
    name: str
    notes: str = ""
    format_notes: str = ""
    null_literal: str = "None"
    categorical: list[CategoricalColumn] = field(default_factory=list)

    def open_readonly(self) -> sqlite3.Connection:
        conn = sqlite3.connect(
            f"file:{self.path}?mode=ro", uri=True, check_same_thread=False
        )
        return conn


class DbRegistry:
    """db_id -> DbEntry; every file is opened once at registration."""

    def __init__(self):
        self._entries: dict[str, DbEntry] = {}

    def register(self, entry: DbEntry) -> None:
        if not entry.path.is_file():
            raise FileNotFoundError(f"database file not found: {entry.path}")
        conn = entry.open_readonly()
        try:
            conn.execute("SELECT 1")
        finally:
            conn.close()
        self._entries[entry.db_id] = entry

    def get(self, db_id: str) -> DbEntry:
        if db_id not in self._entries:
            raise KeyError(f"unknown db_id: {db_id}")
        return self._entries[db_id]

    def __contains__(self, db_id: str) -> bool:
        return db_id in self._entries

    def db_ids(self) -> list[str]:
        return list(self._entries)

    @classmethod
    def load(cls, config_path: str | Path) -> "DbRegistry":
        """Read a registry config: JSON map db_id -> entry fields.

        Relative paths resolve against the config file's directory.
        """
        config_path = Path(config_path)
        with open(config_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        base = config_path.parent
        registry = cls()
        for db_id, spec in doc.items():
            notes = spec.get("notes", "")
            if "notes_path" in spec:
                notes = (base / spec["notes_path"]).read_text(encoding="utf-8")
            format_notes = spec.get("format_notes", "")
            if "format_notes_path" in spec:
                format_notes = (base / spec["format_notes_path"]).read_text(
                    encoding="utf-8"
                )
            categorical = []
            if "categorical_path" in spec:
                with open(base / spec["categorical_path"], encoding="utf-8") as ch:
                    cat_doc = json.load(ch)
                categorical = [
                    CategoricalColumn(
                        table=c["table"],
                        column=c["column"],
                        description=c.get("description", ""),
                    )
                    for c in cat_doc
                ]
            registry.register(
                DbEntry(
                    db_id=db_id,
                    path=(base / spec["path"]).resolve(),
                    name=spec.get("name", db_id),
                    notes=notes,
                    format_notes=format_notes,
                    null_literal=spec.get("null_literal", "None"),
                    categorical=categorical,
                )
            )
        return registry
