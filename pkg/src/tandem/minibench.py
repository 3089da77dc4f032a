"""Materializes the bundled offline benchmark: two fixture databases, ten
questions, and a script that drives the decomposed pipeline to 70.0 accuracy."""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path

from .answers import AnswerSet
from .dataset import Question, save_dataset

EXPECTED_METHOD = "t2sc-multi"
EXPECTED_ACCURACY = 70.0

_MUSIC_ALBUMS = [
    (1, "Aurora", "Lyra", 12.5, 2019),
    (2, "Basalt", "Lyra", 19.99, 2021),
    (3, "Cinder", "Moss", 9.99, 2018),
    (4, "Drift", "Moss", 14.0, 2022),
    (5, "Ember", "Pike", 19.99, 2020),
    (6, "Fjord", "Pike", 7.25, 2017),
]

_MUSIC_SALES = [
    (1, 1, 3, "2023-01-05"),
    (2, 1, 2, "2023-02-11"),
    (3, 2, 1, "2023-01-20"),
    (4, 2, 4, "2023-03-02"),
    (5, 3, 5, "2023-01-30"),
    (6, 3, 1, "2023-04-14"),
    (7, 4, 2, "2023-02-22"),
    (8, 5, 6, "2023-03-19"),
    (9, 5, 2, "2023-04-01"),
    (10, 6, 1, "2023-01-09"),
    (11, 6, 3, "2023-02-27"),
    (12, 2, 2, "2023-04-30"),
]

_AIRPORTS = [
    ("ATL", "Atlanta"),
    ("BOS", "Boston"),
    ("JFK", "New York"),
    ("LAX", "Los Angeles"),
    ("ORD", "Chicago"),
]

_FLIGHTS = [
    (1, "JFK", "LAX", 15),
    (2, "JFK", "ATL", 0),
    (3, "LAX", "ORD", 45),
    (4, "ORD", "JFK", None),
    (5, "BOS", "JFK", 10),
    (6, "ATL", "BOS", 5),
    (7, "JFK", "ORD", 30),
    (8, "LAX", "JFK", 60),
    (9, "ORD", "ATL", 20),
    (10, "ATL", "LAX", 90),
    (11, "BOS", "ORD", 0),
    (12, "JFK", "BOS", 25),
]


def _build_music_db(path: Path) -> None:
    conn = sqlite3.connect(path)
    try:
        conn.executescript(
            """
            CREATE TABLE albums (
                album_id INTEGER PRIMARY KEY,
                title TEXT NOT NULL,
                artist TEXT NOT NULL,
                price REAL NOT NULL,
                released INTEGER NOT NULL
            );
            CREATE TABLE sales (
                sale_id INTEGER PRIMARY KEY,
                album_id INTEGER NOT NULL REFERENCES albums(album_id),
                qty INTEGER NOT NULL,
                day TEXT NOT NULL
            );
            """
        )
        conn.executemany("INSERT INTO albums VALUES (?,?,?,?,?)", _MUSIC_ALBUMS)
        conn.executemany("INSERT INTO sales VALUES (?,?,?,?)", _MUSIC_SALES)
        conn.commit()
    finally:
        conn.close()


def _build_flights_db(path: Path) -> None:
    conn = sqlite3.connect(path)
    try:
        conn.executescript(
            """
            CREATE TABLE airports (
                code TEXT PRIMARY KEY,
                city TEXT NOT NULL
            );
            CREATE TABLE flights (
                flight_id INTEGER PRIMARY KEY,
                origin TEXT NOT NULL REFERENCES airports(code),
                dest TEXT NOT NULL REFERENCES airports(code),
                delay_min INTEGER
            );
            """
        )
        conn.executemany("INSERT INTO airports VALUES (?,?)", _AIRPORTS)
        conn.executemany("INSERT INTO flights VALUES (?,?,?,?)", _FLIGHTS)
        conn.commit()
    finally:
        conn.close()


def _sql(text: str) -> str:
    return f"```sql\n{text}\n```"


def _py(text: str) -> str:
    return f"```python\n{text}\n```"


def _ok(result_text: str) -> dict:
    return {"outcome": "ok", "result_text": result_text, "duration_ms": 4}


_AVG_CODE = """def compute_result(listOfDFs):
    df = listOfDFs[0]
    return [(round(df["total_qty"].mean(), 2),)]"""

_REVENUE_CODE = """def compute_result(listOfDFs):
    albums, sales = listOfDFs
    merged = sales.merge(albums, on="album_id")
    merged["revenue"] = merged["qty"] * merged["price"]
    by_artist = merged.groupby("artist")["revenue"].sum()
    artist = by_artist.idxmax()
    return [(artist, round(by_artist.max(), 2))]"""

_DAYS_CODE = """def compute_result(listOfDFs):
    return [(int(listOfDFs[0]["day"].nunique()),)]"""

_TOP_ORIGIN_CODE = """def compute_result(listOfDFs):
    counts = listOfDFs[0]["origin"].value_counts()
    return [(counts.idxmax(), int(counts.max()))]"""

_ZERO_DELAY_CODE = """def compute_result(listOfDFs):
    df = listOfDFs[0]
    return [(round((df["delay_min"] == 0).mean(), 2),)]"""


def _questions() -> list[Question]:
    def gold(rows):
        return AnswerSet.from_rows(rows)

    return [
        Question(
            id="q01",
            db_id="music",
            text="How many albums does the store carry?",
            gold=gold([[6]]),
            categories=["Calculations over Aggregate Analytics"],
        ),
        Question(
            id="q02",
            db_id="music",
            text="What is the highest album price?",
            gold=gold([[19.99]]),
            categories=["Stat./Math. Operations"],
        ),
        Question(
            id="q03",
            db_id="music",
            text=(
                "What is the average total quantity sold per album,"
                " rounded to two decimals?"
            ),
            gold=gold([[5.33]]),
            categories=["Stat./Math. Operations"],
        ),
        Question(
            id="q04",
            db_id="music",
            text="Which artist earned the most sales revenue, and how much?",
            gold=gold([["Lyra", 202.43]]),
            categories=["Calculations over Aggregate Analytics", "Complex Filtering"],
        ),
        Question(
            id="q05",
            db_id="music",
            text="How many distinct days had at least one sale?",
            gold=gold([[12]]),
            categories=["Temporal Reasoning"],
        ),
        Question(
            id="q06",
            db_id="flights",
            text="How many flights are recorded?",
            gold=gold([[12]]),
            categories=[],
        ),
        Question(
            id="q07",
            db_id="flights",
            text="Which origin airport has the most departures, and how many?",
            gold=gold([["JFK", 4]]),
            categories=["Complex Filtering"],
        ),
        Question(
            id="q08",
            db_id="flights",
            text=(
                "What is the average delay in minutes, ignoring flights with"
                " no recorded delay, rounded to two decimals?"
            ),
            gold=gold([[27.27]]),
            categories=["Analytics over Non-entries in Database", "Stat./Math. Operations"],
        ),
        Question(
            id="q09",
            db_id="flights",
            text="How many airports are in the database?",
            gold=gold([[5]]),
            categories=["Commonsense Knowledge"],
        ),
        Question(
            id="q10",
            db_id="flights",
            text=(
                "What fraction of flights departed with zero delay,"
                " rounded to two decimals?"
            ),
            gold=gold([[0.17]]),
            categories=["Stat./Math. Operations"],
        ),
    ]


def _script() -> dict:
    """Per-question canned model replies and sandbox result documents.

    Correct: q01-q07 (7 of 10). Incorrect: q08 (decomposer never recovers),
    q09 (valid SQL, wrong answer), q10 (output never parses).
    70.0 accuracy, every run.
    """
    bad_decomp = "I would fetch the delays and average them."
    questions = {
        "q01": {
            "decomposer": [
                "Count rows.\nDecomposition:\nText2SQL: count all albums in the store"
            ],
            "text2sql": [_sql("SELECT COUNT(*) FROM albums")],
        },
        "q02": {
            "decomposer": [
                "Decomposition:\nText2SQL: find the maximum album price"
            ],
            "text2sql": [_sql("SELEC MAX(price) FROM albums")],
            "repair_sql": [_sql("SELECT MAX(price) FROM albums")],
        },
        "q03": {
            "decomposer": [
                "Decomposition:\n"
                "Text2SQL: fetch the total quantity sold per album id\n"
                "Python: average the totals and round to two decimals"
            ],
            "text2sql": [
                _sql(
                    "SELECT album_id, SUM(qty) AS total_qty FROM sales"
                    " GROUP BY album_id"
                )
            ],
            "text2python": [_py(_AVG_CODE)],
            "sandbox": [_ok("[(5.33,)]")],
        },
        "q04": {
            "decomposer": [
                "Decomposition:\n"
                "Text2SQL: fetch album id, artist and price for all albums\n"
                "Text2SQL: fetch album id and quantity for all sales\n"
                "Python: join, total revenue per artist, return the top artist"
            ],
            "text2sql": [
                _sql("SELECT album_id, artist, price FROM albums"),
                _sql("SELECT album_id, qty FROM sales"),
            ],
            "text2python": [_py(_REVENUE_CODE)],
            "sandbox": [_ok("[('Lyra', 202.43)]")],
        },
        "q05": {
            "decomposer": [
                "Decomposition:\n"
                "Text2SQL: fetch the day of every sale\n"
                "Python: count the distinct days"
            ],
            "text2sql": [_sql("SELECT day FROM sales")],
            "text2python": [_py(_DAYS_CODE)],
            "repair_code": [_py(_DAYS_CODE)],
            "sandbox": [
                {
                    "outcome": "exec_error",
                    "error": {
                        "type": "KeyError",
                        "message": "'date'",
                        "traceback": "Traceback (most recent call last):\n  KeyError: 'date'",
                    },
                    "duration_ms": 3,
                },
                _ok("[(12,)]"),
            ],
        },
        "q06": {
            "decomposer": [
                "Decomposition:\nText2SQL: count all recorded flights"
            ],
            "text2sql": [_sql("SELECT COUNT(*) FROM flights")],
        },
        "q07": {
            "decomposer": [
                "Decomposition:\n"
                "Text2SQL: fetch the origin airport of every flight\n"
                "Python: count departures per origin and return the top one"
            ],
            "text2sql": [_sql("SELECT origin FROM flights")],
            "text2python": [_py(_TOP_ORIGIN_CODE)],
            "sandbox": [_ok("[('JFK', 4)]")],
        },
        "q08": {
            "decomposer": [bad_decomp, bad_decomp, bad_decomp, bad_decomp],
        },
        "q09": {
            "decomposer": [
                "Decomposition:\nText2SQL: count the airports"
            ],
            "text2sql": [_sql("SELECT COUNT(*) FROM airports WHERE code != 'JFK'")],
        },
        "q10": {
            "decomposer": [
                "Decomposition:\n"
                "Text2SQL: fetch the delay of every flight\n"
                "Python: compute the fraction of zero delays"
            ],
            "text2sql": [_sql("SELECT delay_min FROM flights")],
            "text2python": [_py(_ZERO_DELAY_CODE)],
            "repair_code": [
                _py(_ZERO_DELAY_CODE),
                _py(_ZERO_DELAY_CODE),
                _py(_ZERO_DELAY_CODE),
            ],
            "sandbox": [
                _ok("The fraction is 0.17"),
                _ok("The fraction is 0.17"),
                _ok("The fraction is 0.17"),
                _ok("The fraction is 0.17"),
            ],
        },
    }
    return {"questions": questions}


def build(out_dir: str | Path) -> dict[str, Path]:
    """Write the databases, dataset, registry, and script; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    music = out / "music.sqlite"
    flights = out / "flights.sqlite"
    for path, builder in ((music, _build_music_db), (flights, _build_flights_db)):
        if path.exists():
            path.unlink()
        builder(path)
    dataset = out / "dataset.jsonl"
    save_dataset(_questions(), dataset)
    registry = out / "registry.json"
    registry.write_text(
        json.dumps(
            {
                "music": {"path": "music.sqlite", "name": "Music store"},
                "flights": {"path": "flights.sqlite", "name": "Domestic flights"},
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    script = out / "script.json"
    script.write_text(
        json.dumps(_script(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return {
        "dataset": dataset,
        "registry": registry,
        "script": script,
        "music_db": music,
        "flights_db": flights,
    }
