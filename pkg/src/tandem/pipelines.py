"""The seven answering methods and the post-hoc oracle combiner."""

from __future__ import annotations

import hashlib
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from .answers import (
    FAILURE,
    AnswerSet,
    MatchConfig,
    ParseError,
    answers_match,
    canonicalize_answer,
    is_failure,
    majority_answer,
    predictions_match,
)
from .coderun import (
    CodeExecution,
    Sandbox,
    SandboxLimits,
    run_code_with_repair,
)
from .dataset import DbEntry, Question
from .llm import Backend, CallLedger, LlmRequest
from .prompts import (
    Decomposition,
    DecompositionError,
    PromptSettings,
    parse_decomposition,
    render_prompt,
)
from .sqlrun import (
    DEFAULT_CELL_CAP,
    DEFAULT_SQL_TIMEOUT,
    ResultTable,
    SqlExecution,
    run_sql_step_with_repair,
)

log = logging.getLogger(__name__)

METHOD_NAMES = (
    "knowledge",
    "text2sql",
    "sc",
    "t2sc-single",
    "t2sc-multi",
    "hybrid-single",
    "hybrid-multi",
)


@dataclass(frozen=True)
class MethodId:
    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in METHOD_NAMES:
            raise ValueError(f"unknown method: {self.kind!r}")
        if self.kind == "sc":
            if self.k is None or self.k < 2:
                raise ValueError("sc needs K >= 2")
        elif self.k is not None:
            raise ValueError(f"method {self.kind} takes no K")

    @classmethod
    def parse(cls, text: str) -> "MethodId":
        if text.startswith("sc:"):
            return cls(kind="sc", k=int(text[len("sc:"):]))
        return cls(kind=text)

    @property
    def label(self) -> str:
        return f"sc:{self.k}" if self.kind == "sc" else self.kind


@dataclass
class PipelineEnv:
    """Everything one (question, run) execution needs."""

    entry: DbEntry
    settings: PromptSettings
    backend: Backend
    ledger: CallLedger
    sandbox: Sandbox
    scratch_root: Path
    match_cfg: MatchConfig = field(default_factory=MatchConfig)
    max_repairs: int = 3
    sql_timeout: float = DEFAULT_SQL_TIMEOUT
    cell_cap: int = DEFAULT_CELL_CAP
    limits: SandboxLimits = field(default_factory=SandboxLimits)


@dataclass
class Trace:
    question_id: str
    method: str
    run_index: int
    prediction: object  # AnswerSet or FAILURE
    llm_calls: int = 0
    used_python: bool = False
    decomposition: Decomposition | None = None
    sql_executions: list[SqlExecution] = field(default_factory=list)
    code_execution: CodeExecution | None = None
    routed_to_t2sc: bool | None = None
    calls_by_tag: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json_obj(self, include_timings: bool = False) -> dict:
        doc = {
            "question_id": self.question_id,
            "method": self.method,
            "run_index": self.run_index,
            "prediction": (
                {"failure": True}
                if is_failure(self.prediction)
                else {"answer": self.prediction.to_json_obj()}
            ),
            "llm_calls": self.llm_calls,
            "used_python": self.used_python,
            "routed_to_t2sc": self.routed_to_t2sc,
            "calls_by_tag": dict(sorted(self.calls_by_tag.items())),
            "decomposition": (
                None
                if self.decomposition is None
                else {
                    "cot_preamble": self.decomposition.cot_preamble,
                    "steps": [
                        {"kind": s.kind, "text": s.text}
                        for s in self.decomposition.steps
                    ],
                }
            ),
            "sql_executions": [
                {
                    "step_text": ex.step_text,
                    "final_ok": ex.final_ok,
                    "attempts": [
                        {
                            "query": at.query,
                            "outcome": at.outcome.kind,
                            "message": at.outcome.message,
                            "rows": (
                                at.outcome.table.row_count
                                if at.outcome.table is not None
                                else None
                            ),
                        }
                        for at in ex.attempts
                    ],
                }
                for ex in self.sql_executions
            ],
            "code_execution": (
                None
                if self.code_execution is None
                else {
                    "final_ok": self.code_execution.final_ok,
                    "sandbox_invocations": self.code_execution.sandbox_invocations,
                    "attempts": [
                        {
                            "code": at.code,
                            "outcome": at.result.outcome,
                            "error": at.result.error,
                            "result_text": at.result.result_text,
                        }
                        for at in self.code_execution.attempts
                    ],
                }
            ),
        }
        if include_timings:
            doc["timings"] = self.timings
        return doc


@dataclass
class ScoredTrace:
    """The slice of a trace the evaluator needs; parsed from trace JSONL."""

    question_id: str
    method: str
    run_index: int
    prediction: object
    llm_calls: int
    used_python: bool
    routed_to_t2sc: bool | None = None

    @classmethod
    def from_json_obj(cls, doc: dict) -> "ScoredTrace":
        pred_doc = doc["prediction"]
        if pred_doc.get("failure"):
            prediction = FAILURE
        else:
            prediction = AnswerSet.from_json_obj(pred_doc["answer"])
        return cls(
            question_id=doc["question_id"],
            method=doc["method"],
            run_index=int(doc["run_index"]),
            prediction=prediction,
            llm_calls=int(doc["llm_calls"]),
            used_python=bool(doc["used_python"]),
            routed_to_t2sc=doc.get("routed_to_t2sc"),
        )


def derive_seed(master_seed: int, qid: str, run_index: int, method: str) -> int:
    """Stable per-(question, run, method) seed; worker order cannot change it."""
    digest = hashlib.sha256(
        f"{master_seed}:{qid}:{run_index}:{method}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "big")


def _answer_from_table(table: ResultTable) -> AnswerSet:
    return AnswerSet.from_rows(table.rows)


def run_knowledge(q: Question, env: PipelineEnv, run_index: int = 0) -> Trace:
    started = time.monotonic()
    prompt = render_prompt(
        "knowledge", env.settings.schema_text, q.text, env.settings.extras_for("knowledge")
    )
    response = env.backend.complete(LlmRequest.user(prompt, tag="knowledge"))
    try:
        prediction = canonicalize_answer(response.text)
    except ParseError:
        prediction = FAILURE
    trace = Trace(
        question_id=q.id,
        method="knowledge",
        run_index=run_index,
        prediction=prediction,
        llm_calls=env.ledger.total,
        calls_by_tag=env.ledger.by_tag(),
    )
    trace.timings = {"wall_s": time.monotonic() - started}
    return trace


def _run_text2sql_once(q_text: str, env: PipelineEnv) -> tuple[SqlExecution, object]:
    execution = run_sql_step_with_repair(
        q_text,
        env.entry,
        env.settings,
        env.backend,
        max_repairs=env.max_repairs,
        timeout=env.sql_timeout,
        cell_cap=env.cell_cap,
    )
    if execution.final_ok:
        return execution, _answer_from_table(execution.final_table)
    return execution, FAILURE


def run_text2sql(q: Question, env: PipelineEnv, run_index: int = 0) -> Trace:
    started = time.monotonic()
    execution, prediction = _run_text2sql_once(q.text, env)
    trace = Trace(
        question_id=q.id,
        method="text2sql",
        run_index=run_index,
        prediction=prediction,
        llm_calls=env.ledger.total,
        sql_executions=[execution],
        calls_by_tag=env.ledger.by_tag(),
    )
    trace.timings = {"wall_s": time.monotonic() - started}
    return trace


def run_sc(
    q: Question, env: PipelineEnv, k: int, rng: random.Random, run_index: int = 0
) -> Trace:
    if k < 2:
        raise ValueError("sc needs K >= 2")
    started = time.monotonic()
    executions: list[SqlExecution] = []
    candidates = []
    for _ in range(k):
        execution, prediction = _run_text2sql_once(q.text, env)
        executions.append(execution)
        candidates.append(prediction)
    prediction, _was_majority = majority_answer(candidates, rng, env.match_cfg)
    trace = Trace(
        question_id=q.id,
        method=f"sc:{k}",
        run_index=run_index,
        prediction=prediction,
        llm_calls=env.ledger.total,
        sql_executions=executions,
        calls_by_tag=env.ledger.by_tag(),
    )
    trace.timings = {"wall_s": time.monotonic() - started}
    return trace


def _decompose_with_repair(
    q: Question, env: PipelineEnv
) -> tuple[Decomposition | None, str]:
    """Decomposer attempt plus repairs under the same budget; tag: decomposer."""
    artifact = ""
    error_text = ""
    for attempt_no in range(1 + env.max_repairs):
        if attempt_no == 0:
            prompt = render_prompt(
                "decomposer",
                env.settings.schema_text,
                q.text,
                env.settings.extras_for("decomposer"),
            )
        else:
            prompt = render_prompt(
                "repair_decomposer",
                env.settings.schema_text,
                q.text,
                env.settings.extras_for(
                    "repair_decomposer", artifact=artifact, error=error_text
                ),
            )
        response = env.backend.complete(LlmRequest.user(prompt, tag="decomposer"))
        try:
            return parse_decomposition(response.text), ""
        except DecompositionError as exc:
            artifact = response.text
            error_text = str(exc)
    return None, error_text


def run_t2sc_multi(q: Question, env: PipelineEnv, run_index: int = 0) -> Trace:
    started = time.monotonic()
    trace = Trace(
        question_id=q.id,
        method="t2sc-multi",
        run_index=run_index,
        prediction=FAILURE,
    )
    decomposition, _error = _decompose_with_repair(q, env)
    trace.decomposition = decomposition
    if decomposition is not None:
        tables: list[ResultTable] = []
        all_ok = True
        for step in decomposition.sql_steps:
            execution = run_sql_step_with_repair(
                step.text,
                env.entry,
                env.settings,
                env.backend,
                max_repairs=env.max_repairs,
                timeout=env.sql_timeout,
                cell_cap=env.cell_cap,
            )
            trace.sql_executions.append(execution)
            if not execution.final_ok:
                all_ok = False
                break
            tables.append(execution.final_table)
        if all_ok:
            if not decomposition.code_steps:
                if len(decomposition.sql_steps) == 1:
                    trace.prediction = _answer_from_table(tables[0])
                else:
                    # Several SQL steps with nothing to combine them is a
                    # decomposition defect, not something to merge silently.
                    log.warning(
                        "question %s: %d SQL steps but no Python step", q.id,
                        len(decomposition.sql_steps),
                    )
            else:
                code_exec = run_code_with_repair(
                    "multi",
                    q.text,
                    env.settings,
                    env.backend,
                    env.sandbox,
                    env.scratch_root,
                    tables=tables,
                    decomposition=decomposition,
                    max_repairs=env.max_repairs,
                    limits=env.limits,
                )
                trace.code_execution = code_exec
                trace.used_python = code_exec.sandbox_invocations > 0
                if code_exec.final_ok:
                    trace.prediction = code_exec.final_answer
    trace.llm_calls = env.ledger.total
    trace.calls_by_tag = env.ledger.by_tag()
    trace.timings = {"wall_s": time.monotonic() - started}
    return trace


def run_t2sc_single(q: Question, env: PipelineEnv, run_index: int = 0) -> Trace:
    started = time.monotonic()
    code_exec = run_code_with_repair(
        "single",
        q.text,
        env.settings,
        env.backend,
        env.sandbox,
        env.scratch_root,
        db_path=env.entry.path,
        max_repairs=env.max_repairs,
        limits=env.limits,
    )
    trace = Trace(
        question_id=q.id,
        method="t2sc-single",
        run_index=run_index,
        prediction=code_exec.final_answer if code_exec.final_ok else FAILURE,
        llm_calls=env.ledger.total,
        used_python=code_exec.sandbox_invocations > 0,
        code_execution=code_exec,
        calls_by_tag=env.ledger.by_tag(),
    )
    trace.timings = {"wall_s": time.monotonic() - started}
    return trace


def run_hybrid(
    q: Question,
    env: PipelineEnv,
    variant: str,
    rng: random.Random,
    run_index: int = 0,
) -> Trace:
    """Three Text2SQL probes; 2-of-3 agreement decides, else route to t2sc."""
    if variant not in ("single", "multi"):
        raise ValueError(f"bad hybrid variant: {variant!r}")
    started = time.monotonic()
    method = f"hybrid-{variant}"
    probes: list[SqlExecution] = []
    answers = []
    for _ in range(3):
        execution, prediction = _run_text2sql_once(q.text, env)
        probes.append(execution)
        answers.append(prediction)
    agreed = None
    for i in range(3):
        for j in range(i + 1, 3):
            if predictions_match(answers[i], answers[j], env.match_cfg):
                agreed = answers[i]
                break
        if agreed is not None:
            break
    trace = Trace(
        question_id=q.id,
        method=method,
        run_index=run_index,
        prediction=FAILURE,
        sql_executions=probes,
    )
    if agreed is not None:
        trace.prediction = agreed
        trace.routed_to_t2sc = False
    else:
        trace.routed_to_t2sc = True
        if variant == "single":
            sub = run_t2sc_single(q, env, run_index=run_index)
        else:
            sub = run_t2sc_multi(q, env, run_index=run_index)
        trace.prediction = sub.prediction
        trace.decomposition = sub.decomposition
        trace.sql_executions = probes + sub.sql_executions
        trace.code_execution = sub.code_execution
        trace.used_python = sub.used_python
    trace.llm_calls = env.ledger.total
    trace.calls_by_tag = env.ledger.by_tag()
    trace.timings = {"wall_s": time.monotonic() - started}
    return trace


def run_method(
    q: Question,
    env: PipelineEnv,
    method: MethodId,
    rng: random.Random,
    run_index: int = 0,
) -> Trace:
    if method.kind == "knowledge":
        return run_knowledge(q, env, run_index)
    if method.kind == "text2sql":
        return run_text2sql(q, env, run_index)
    if method.kind == "sc":
        return run_sc(q, env, method.k, rng, run_index)
    if method.kind == "t2sc-single":
        return run_t2sc_single(q, env, run_index)
    if method.kind == "t2sc-multi":
        return run_t2sc_multi(q, env, run_index)
    if method.kind == "hybrid-single":
        return run_hybrid(q, env, "single", rng, run_index)
    if method.kind == "hybrid-multi":
        return run_hybrid(q, env, "multi", rng, run_index)
    raise ValueError(f"unknown method: {method}")


class QuestionMismatch(ValueError):
    pass


@dataclass
class OracleVerdict:
    question_id: str
    correct: bool
    a_correct: bool
    b_correct: bool


def oracle_combine(
    trace_a, trace_b, gold: AnswerSet, cfg: MatchConfig = MatchConfig()
) -> OracleVerdict:
    """Correct iff either method's prediction matches gold (post-hoc best)."""
    if trace_a.question_id != trace_b.question_id:
        raise QuestionMismatch(
            f"{trace_a.question_id!r} vs {trace_b.question_id!r}"
        )
    a_ok = not is_failure(trace_a.prediction) and answers_match(
        trace_a.prediction, gold, cfg
    )
    b_ok = not is_failure(trace_b.prediction) and answers_match(
        trace_b.prediction, gold, cfg
    )
    return OracleVerdict(
        question_id=trace_a.question_id,
        correct=a_ok or b_ok,
        a_correct=a_ok,
        b_correct=b_ok,
    )
