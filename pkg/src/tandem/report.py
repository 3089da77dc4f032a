"""Scoring trace files against gold answers; accuracy and routing tables."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .answers import MatchConfig, answers_match, is_failure
from .dataset import Question
from .pipelines import ScoredTrace, oracle_combine

log = logging.getLogger(__name__)


class UnknownQuestion(KeyError):
    pass


class CoverageMismatch(ValueError):
    pass


def _is_correct(trace: ScoredTrace, gold, cfg: MatchConfig) -> bool:
    return not is_failure(trace.prediction) and answers_match(
        trace.prediction, gold, cfg
    )


def _group_runs(traces: list[ScoredTrace]) -> dict[int, dict[str, ScoredTrace]]:
    runs: dict[int, dict[str, ScoredTrace]] = {}
    for t in traces:
        bucket = runs.setdefault(t.run_index, {})
        if t.question_id in bucket:
            log.warning(
                "duplicate trace for question %s run %d; keeping the last",
                t.question_id,
                t.run_index,
            )
        bucket[t.question_id] = t
    return runs


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


@dataclass
class MethodReport:
    method: str
    runs_averaged: int
    overall: float
    mean_calls: float
    per_db: dict[str, float]
    per_category: dict[str, float]
    per_run_overall: dict[int, float]


@dataclass
class Report:
    n_questions: int
    methods: dict[str, MethodReport] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "methods": {
                label: {
                    "runs_averaged": m.runs_averaged,
                    "overall": round(m.overall, 1),
                    "mean_calls": round(m.mean_calls, 1),
                    "per_db": {k: round(v, 1) for k, v in sorted(m.per_db.items())},
                    "per_category": {
                        k: round(v, 1) for k, v in sorted(m.per_category.items())
                    },
                    "per_run_overall": {
                        str(r): round(v, 1)
                        for r, v in sorted(m.per_run_overall.items())
                    },
                }
                for label, m in sorted(self.methods.items())
            },
        }


def score_traces(
    traces: list[ScoredTrace],
    questions: list[Question],
    cfg: MatchConfig = MatchConfig(),
) -> Report:
    """Per-run accuracy first, then the mean over runs; question-weighted."""
    by_id = {q.id: q for q in questions}
    for t in traces:
        if t.question_id not in by_id:
            raise UnknownQuestion(t.question_id)
    db_ids = sorted({q.db_id for q in questions})
    categories = sorted({c for q in questions for c in q.categories})
    report = Report(n_questions=len(questions))
    by_method: dict[str, list[ScoredTrace]] = {}
    for t in traces:
        by_method.setdefault(t.method, []).append(t)
    for method, method_traces in sorted(by_method.items()):
        runs = _group_runs(method_traces)
        n_runs = len(runs)
        expected_runs = max(runs) + 1 if runs else 0
        if n_runs < expected_runs:
            log.warning(
                "method %s: run indices are sparse (%d of %d); averaging over"
                " available runs",
                method,
                n_runs,
                expected_runs,
            )
        per_run_overall: dict[int, float] = {}
        per_db_runs: dict[str, list[float]] = {d: [] for d in db_ids}
        per_cat_runs: dict[str, list[float]] = {c: [] for c in categories}
        calls_runs: list[float] = []
        for run_index, bucket in sorted(runs.items()):
            if len(bucket) < len(questions):
                log.warning(
                    "method %s run %d covers %d of %d questions",
                    method,
                    run_index,
                    len(bucket),
                    len(questions),
                )
            verdicts = {
                qid: _is_correct(t, by_id[qid].gold, cfg)
                for qid, t in bucket.items()
            }
            per_run_overall[run_index] = 100.0 * _mean(verdicts.values())
            calls_runs.append(_mean(t.llm_calls for t in bucket.values()))
            for db in db_ids:
                scoped = [
                    verdicts[qid]
                    for qid in bucket
                    if by_id[qid].db_id == db
                ]
                if scoped:
                    per_db_runs[db].append(100.0 * _mean(scoped))
            for cat in categories:
                scoped = [
                    verdicts[qid]
                    for qid in bucket
                    if cat in by_id[qid].categories
                ]
                if scoped:
                    per_cat_runs[cat].append(100.0 * _mean(scoped))
        report.methods[method] = MethodReport(
            method=method,
            runs_averaged=n_runs,
            overall=_mean(per_run_overall.values()),
            mean_calls=_mean(calls_runs),
            per_db={d: _mean(v) for d, v in per_db_runs.items() if v},
            per_category={c: _mean(v) for c, v in per_cat_runs.items() if v},
            per_run_overall=per_run_overall,
        )
    return report


@dataclass
class RoutingTable:
    n_questions: int
    n_reference_correct: int
    n_reference_incorrect: int
    pct_full: float
    delta_correct: float
    delta_incorrect: float
    per_run: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "n_reference_correct": self.n_reference_correct,
            "n_reference_incorrect": self.n_reference_incorrect,
            "pct_python_full": round(self.pct_full, 1),
            "delta_on_reference_correct": round(self.delta_correct, 1),
            "delta_on_reference_incorrect": round(self.delta_incorrect, 1),
            "per_run": {
                str(r): {k: round(v, 1) for k, v in sorted(vals.items())}
                for r, vals in sorted(self.per_run.items())
            },
        }


def routing_analysis(
    t2sc_traces: list[ScoredTrace],
    reference_traces: list[ScoredTrace],
    questions: list[Question],
    cfg: MatchConfig = MatchConfig(),
    reference_run: int = 0,
) -> RoutingTable:
    """Python-usage rate overall, and relative to it on the subsets where the
    reference Text2SQL run was correct / incorrect."""
    by_id = {q.id: q for q in questions}
    ref_runs = _group_runs(reference_traces)
    if reference_run not in ref_runs:
        raise CoverageMismatch(f"reference traces lack run index {reference_run}")
    reference = ref_runs[reference_run]
    t2sc_runs = _group_runs(t2sc_traces)
    qids = sorted(by_id)
    for qid in qids:
        if qid not in reference:
            raise CoverageMismatch(f"reference run missing question {qid}")
        for run_index, bucket in t2sc_runs.items():
            if qid not in bucket:
                raise CoverageMismatch(
                    f"t2sc run {run_index} missing question {qid}"
                )
    ref_correct = {
        qid: _is_correct(reference[qid], by_id[qid].gold, cfg) for qid in qids
    }
    correct_set = [q for q in qids if ref_correct[q]]
    incorrect_set = [q for q in qids if not ref_correct[q]]
    per_run: dict[int, dict[str, float]] = {}
    fulls, corrects, incorrects = [], [], []
    for run_index, bucket in sorted(t2sc_runs.items()):
        used = {qid: bucket[qid].used_python for qid in qids}
        full = 100.0 * _mean(used[q] for q in qids)
        on_correct = 100.0 * _mean(used[q] for q in correct_set) if correct_set else full
        on_incorrect = (
            100.0 * _mean(used[q] for q in incorrect_set) if incorrect_set else full
        )
        per_run[run_index] = {
            "pct_python_full": full,
            "pct_on_reference_correct": on_correct,
            "pct_on_reference_incorrect": on_incorrect,
        }
        fulls.append(full)
        corrects.append(on_correct)
        incorrects.append(on_incorrect)
    pct_full = _mean(fulls)
    return RoutingTable(
        n_questions=len(qids),
        n_reference_correct=len(correct_set),
        n_reference_incorrect=len(incorrect_set),
        pct_full=pct_full,
        delta_correct=_mean(corrects) - pct_full,
        delta_incorrect=_mean(incorrects) - pct_full,
        per_run=per_run,
    )


@dataclass
class OracleReport:
    per_run: dict[int, dict[str, float]]
    oracle_overall: float
    a_overall: float
    b_overall: float

    @property
    def dominance_holds(self) -> bool:
        return self.oracle_overall >= max(self.a_overall, self.b_overall) - 1e-9

    def to_json_obj(self) -> dict:
        return {
            "oracle_overall": round(self.oracle_overall, 1),
            "a_overall": round(self.a_overall, 1),
            "b_overall": round(self.b_overall, 1),
            "dominance_holds": self.dominance_holds,
            "per_run": {
                str(r): {k: round(v, 1) for k, v in sorted(vals.items())}
                for r, vals in sorted(self.per_run.items())
            },
        }


def score_oracle(
    traces_a: list[ScoredTrace],
    traces_b: list[ScoredTrace],
    questions: list[Question],
    cfg: MatchConfig = MatchConfig(),
) -> OracleReport:
    """Post-hoc best-of-two accuracy, run-aligned."""
    by_id = {q.id: q for q in questions}
    runs_a = _group_runs(traces_a)
    runs_b = _group_runs(traces_b)
    shared_runs = sorted(set(runs_a) & set(runs_b))
    if not shared_runs:
        raise CoverageMismatch("no run index present in both trace sets")
    if set(runs_a) != set(runs_b):
        log.warning(
            "trace sets have different run indices; using the intersection %s",
            shared_runs,
        )
    per_run: dict[int, dict[str, float]] = {}
    oracle_accs, a_accs, b_accs = [], [], []
    for run_index in shared_runs:
        bucket_a, bucket_b = runs_a[run_index], runs_b[run_index]
        qids = sorted(by_id)
        for qid in qids:
            if qid not in bucket_a or qid not in bucket_b:
                raise CoverageMismatch(
                    f"run {run_index} missing question {qid} in one trace set"
                )
        verdicts = [
            oracle_combine(bucket_a[qid], bucket_b[qid], by_id[qid].gold, cfg)
            for qid in qids
        ]
        oracle = 100.0 * _mean(v.correct for v in verdicts)
        a_acc = 100.0 * _mean(v.a_correct for v in verdicts)
        b_acc = 100.0 * _mean(v.b_correct for v in verdicts)
        per_run[run_index] = {"oracle": oracle, "a": a_acc, "b": b_acc}
        oracle_accs.append(oracle)
        a_accs.append(a_acc)
        b_accs.append(b_acc)
    return OracleReport(
        per_run=per_run,
        oracle_overall=_mean(oracle_accs),
        a_overall=_mean(a_accs),
        b_overall=_mean(b_accs),
    )


def render_markdown(report: Report) -> str:
    """Accuracy table in the headline-table layout: per-db, overall, calls."""
    db_ids = sorted({db for m in report.methods.values() for db in m.per_db})
    header = ["Method"] + db_ids + ["Overall", "Calls"]
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for label, m in sorted(report.methods.items()):
        row = [label]
        row += [
            f"{m.per_db[db]:.1f}" if db in m.per_db else "-" for db in db_ids
        ]
        row += [f"{m.overall:.1f}", f"{m.mean_calls:.1f}"]
        lines.append("| " + " | ".join(row) + " |")
    categories = sorted(
        {c for m in report.methods.values() for c in m.per_category}
    )
    if categories:
        lines.append("")
        cat_header = ["Method"] + categories
        lines.append("| " + " | ".join(cat_header) + " |")
        lines.append("| " + " | ".join("---" for _ in cat_header) + " |")
        for label, m in sorted(report.methods.items()):
            row = [label] + [
                f"{m.per_category[c]:.1f}" if c in m.per_category else "-"
                for c in categories
            ]
            lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def export_report(report: Report, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_json_obj(), indent=2, sort_keys=True) + "\n"
    if fmt == "markdown-table":
        return render_markdown(report)
    raise ValueError(f"unknown report format: {fmt!r}")
