"""Client side of the sandbox: payload serialization, job submission, repair."""

from __future__ import annotations

import json
import logging
import shutil
import stat
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .answers import AnswerSet, ParseError, canonicalize_answer
from .llm import Backend, LlmRequest
from .prompts import (
    FORMAT_INSTRUCTION,
    Decomposition,
    NoBlockFound,
    PromptSettings,
    extract_fenced,
    render_prompt,
)
from .sqlrun import ResultTable, TableShape, shape_of

log = logging.getLogger(__name__)

DEFAULT_WALL_TIMEOUT = 300.0
DEFAULT_MEMORY_BYTES = 4 * 1024**3
DEFAULT_RESULT_CAP = 1024**2
DEFAULT_MAX_REPAIRS = 3
TRACEBACK_TAIL_LINES = 20
SUBPROCESS_GRACE = 30.0


@dataclass(frozen=True)
class SandboxLimits:
    wall_timeout_s: float = DEFAULT_WALL_TIMEOUT
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    no_network: bool = True

    def __post_init__(self):
        if self.wall_timeout_s <= 0 or self.memory_bytes <= 0:
            raise ValueError("sandbox limits must be positive")

    def to_json_obj(self) -> dict:
        return {
            "wall_timeout_s": self.wall_timeout_s,
            "memory_bytes": self.memory_bytes,
            "no_network": self.no_network,
        }


@dataclass
class SandboxJob:
    mode: str  # "multi" | "single"
    code: str
    entry: str = "compute_result"
    inputs: list[str] = field(default_factory=list)  # multi: payload paths
    db_path: str | None = None  # single
    limits: SandboxLimits = field(default_factory=SandboxLimits)

    def __post_init__(self):
        if self.mode not in ("multi", "single"):
            raise ValueError(f"bad sandbox mode: {self.mode!r}")
        if self.mode == "single" and not self.db_path:
            raise ValueError("single mode needs db_path")

    def to_json_obj(self) -> dict:
        doc = {
            "mode": self.mode,
            "code": self.code,
            "entry": self.entry,
            "limits": self.limits.to_json_obj(),
        }
        if self.mode == "multi":
            doc["inputs"] = list(self.inputs)
        else:
            doc["db_path"] = self.db_path
        return doc


@dataclass
class SandboxResult:
    outcome: str  # "ok" | "exec_error" | "timeout" | "oom"
    result_text: str | None = None
    error: dict | None = None  # {type, message, traceback}
    duration_s: float = 0.0
    truncated: bool = False

    @classmethod
    def from_json_obj(cls, doc: dict, result_cap: int = DEFAULT_RESULT_CAP) -> "SandboxResult":
        outcome = doc.get("outcome")
        if outcome not in ("ok", "exec_error", "timeout", "oom"):
            return cls.harness_error(f"malformed result document: outcome={outcome!r}")
        text = doc.get("result_text")
        truncated = False
        if isinstance(text, str) and len(text) > result_cap:
            text = text[:result_cap]
            truncated = True
        return cls(
            outcome=outcome,
            result_text=text,
            error=doc.get("error"),
            duration_s=float(doc.get("duration_ms", 0.0)) / 1000.0,
            truncated=truncated,
        )

    @classmethod
    def harness_error(cls, message: str) -> "SandboxResult":
        return cls(
            outcome="exec_error",
            error={"type": "harness", "message": message, "traceback": ""},
        )


def format_sandbox_error(result: SandboxResult) -> str:
    """Error text fed back to the repair prompt: type, message, traceback tail."""
    if result.outcome == "timeout":
        return "execution exceeded the time limit"
    if result.outcome == "oom":
        return "execution exceeded the memory limit"
    err = result.error or {}
    lines = [f"{err.get('type', 'Error')}: {err.get('message', '')}".rstrip(": ")]
    tb = (err.get("traceback") or "").splitlines()
    if tb:
        lines.extend(tb[-TRACEBACK_TAIL_LINES:])
    return "\n".join(lines)


def serialize_table(table: ResultTable, path: str | Path) -> TableShape:
    """Write the interchange payload; returns the shape used in prompts.

    Nulls stay JSON null; numbers stay numbers; text (including the literal
    string "\\N") stays a string.
    """
    shape = shape_of(table)
    doc = {
        "columns": [{"name": name, "dtype": dt} for name, dt in shape.columns],
        "rows": table.rows,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False)
    return shape


def read_table_payload(path: str | Path) -> ResultTable:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return ResultTable(
        columns=[c["name"] for c in doc["columns"]],
        rows=[list(r) for r in doc["rows"]],
    )


class Sandbox:
    """Interface: run(job, scratch) -> SandboxResult."""

    def run(self, job: SandboxJob, scratch: Path) -> SandboxResult:
        raise NotImplementedError


class StubSandbox(Sandbox):
    """Replays canned result documents; used wherever no runner is installed."""

    def __init__(self, results: list[dict] | None = None):
        self._results = list(results or [])
        self.calls = 0
        self.jobs: list[SandboxJob] = []

    def run(self, job: SandboxJob, scratch: Path) -> SandboxResult:
        self.calls += 1
        self.jobs.append(job)
        if not self._results:
            return SandboxResult.harness_error("stub sandbox has no scripted result")
        return SandboxResult.from_json_obj(self._results.pop(0))


class SubprocessSandbox(Sandbox):
    """Invokes the runner CLI: writes job.json, reads <job>.result.json."""

    def __init__(self, runner_argv: list[str] | None = None):
        self.runner_argv = runner_argv or [sys.executable, "-m", "tandem_runner"]
        self._counter = 0

    def run(self, job: SandboxJob, scratch: Path) -> SandboxResult:
        self._counter += 1
        job_path = Path(scratch) / f"job_{self._counter}.json"
        result_path = job_path.with_name(job_path.stem + ".result.json")
        with open(job_path, "w", encoding="utf-8") as fh:
            json.dump(job.to_json_obj(), fh, ensure_ascii=False)
        started = time.monotonic()
        try:
            proc = subprocess.run(
                self.runner_argv + [str(job_path)],
                capture_output=True,
                text=True,
                timeout=job.limits.wall_timeout_s + SUBPROCESS_GRACE,
            )
        except subprocess.TimeoutExpired:
            return SandboxResult(
                outcome="timeout", duration_s=time.monotonic() - started
            )
        if not result_path.is_file():
            tail = (proc.stderr or "")[-2000:]
            return SandboxResult.harness_error(
                f"runner exited {proc.returncode} without a result document: {tail}"
            )
        try:
            with open(result_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            return SandboxResult.harness_error(f"unreadable result document: {exc}")
        return SandboxResult.from_json_obj(doc)


@dataclass
class CodeAttempt:
    code: str
    result: SandboxResult


@dataclass
class CodeExecution:
    attempts: list[CodeAttempt] = field(default_factory=list)
    final_answer: AnswerSet | None = None
    sandbox_invocations: int = 0

    @property
    def final_ok(self) -> bool:
        return self.final_answer is not None


def _prepare_scratch(scratch_root: Path) -> Path:
    scratch_root.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix="job-", dir=scratch_root))


def stage_database(db_path: Path, scratch: Path) -> Path:
    """Copy the database into the scratch dir and drop write permission."""
    staged = scratch / db_path.name
    shutil.copyfile(db_path, staged)
    staged.chmod(stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
    return staged


def run_code_with_repair(
    mode: str,
    question_text: str,
    settings: PromptSettings,
    backend: Backend,
    sandbox: Sandbox,
    scratch_root: Path,
    tables: list[ResultTable] | None = None,
    decomposition: Decomposition | None = None,
    db_path: Path | None = None,
    max_repairs: int = DEFAULT_MAX_REPAIRS,
    limits: SandboxLimits | None = None,
) -> CodeExecution:
    """First attempt from the code-generation prompt, then bounded repairs.

    A sandbox "ok" whose output fails answer canonicalization is repairable
    with a format reminder; NoBlockFound consumes an attempt without touching
    the sandbox.
    """
    limits = limits or SandboxLimits()
    execution = CodeExecution()
    scratch = _prepare_scratch(Path(scratch_root))
    payload_paths: list[str] = []
    shapes: list[TableShape] = []
    if mode == "multi":
        if tables is None or decomposition is None:
            raise ValueError("multi mode needs tables and decomposition")
        for i, table in enumerate(tables):
            path = scratch / f"table_{i:02d}.json"
            shapes.append(serialize_table(table, path))
            payload_paths.append(str(path))
        first_kind, first_tag = "text2python", "text2python"
    elif mode == "single":
        if db_path is None:
            raise ValueError("single mode needs db_path")
        staged_db = stage_database(Path(db_path), scratch)
        first_kind, first_tag = "single_shot", "single_shot"
    else:
        raise ValueError(f"bad mode: {mode!r}")
    artifact = ""
    error_text = ""
    for attempt_no in range(1 + max_repairs):
        if attempt_no == 0:
            extras = settings.extras_for(first_kind)
            if mode == "multi":
                extras.update(decomposition=decomposition, shapes=shapes)
            prompt = render_prompt(first_kind, settings.schema_text, question_text, extras)
            tag = first_tag
        else:
            extras = settings.extras_for(
                "repair_code", artifact=artifact, error=error_text
            )
            prompt = render_prompt("repair_code", settings.schema_text, question_text, extras)
            tag = "repair_code"
        response = backend.complete(LlmRequest.user(prompt, tag=tag))
        try:
            code = extract_fenced(response.text, "python")
        except NoBlockFound as exc:
            artifact = response.text
            error_text = str(exc)
            execution.attempts.append(
                CodeAttempt(
                    code="",
                    result=SandboxResult(
                        outcome="exec_error",
                        error={
                            "type": "NoPythonBlock",
                            "message": str(exc),
                            "traceback": "",
                        },
                    ),
                )
            )
            continue
        if mode == "multi":
            job = SandboxJob(mode="multi", code=code, inputs=payload_paths, limits=limits)
        else:
            job = SandboxJob(mode="single", code=code, db_path=str(staged_db), limits=limits)
        result = sandbox.run(job, scratch)
        execution.sandbox_invocations += 1
        execution.attempts.append(CodeAttempt(code=code, result=result))
        if result.outcome == "ok":
            try:
                execution.final_answer = canonicalize_answer(result.result_text or "")
                break
            except ParseError as exc:
                artifact = code
                error_text = (
                    f"the output did not parse as an answer: {exc}. "
                    + FORMAT_INSTRUCTION
                )
                continue
        artifact = code
        error_text = format_sandbox_error(result)
    return execution
