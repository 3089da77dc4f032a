"""Executes one generated-code job in this process and writes the result.

The process is disposable: resource limits, the environment scrub, and the
working-directory change are applied in place before any user code loads,
the code runs once, and the result document lands next to the job document.
Nothing in :func:`run_job` is safe to call from a long-lived process — run it
via ``python -m tandem_runner <job.json>`` (or the ``tandem-runner`` script).

Exit status is 0 whenever a result document was written, whatever the
outcome inside it; a non-zero status means the harness itself failed (bad
job document, unwritable result) and no outcome could be reported.
"""

from __future__ import annotations

import io
import json
import os
import shutil
import signal
import sys
import time
import traceback
from contextlib import redirect_stdout
from dataclasses import dataclass, field
from pathlib import Path

from .serialize import UnserializableReturn, serialize_answer

DEFAULT_WALL_TIMEOUT = 300.0
DEFAULT_MEMORY_BYTES = 4 * 1024**3
# Parity with the client's caps: anything longer is cut, never a failure.
RESULT_TEXT_CAP = 1 << 20
STDOUT_CAP = 1 << 20

# Environment variables the job keeps; everything else is dropped, and the
# home/temp locations are redirected into the scratch directory.
ENV_ALLOWLIST = ("PATH", "LANG", "LC_ALL", "LC_CTYPE", "TZ", "PYTHONHASHSEED")

EXIT_OK = 0
EXIT_BAD_JOB = 2
EXIT_UNWRITABLE_RESULT = 3
EXIT_USAGE = 64


class JobError(ValueError):
    """The job document is malformed or points outside its scratch directory."""


class _WallTimeout(BaseException):
    """Raised by the wall-clock alarm.

    Derives from BaseException so user code cannot swallow the deadline with
    a bare ``except Exception``.
    """


def _contained(scratch: Path, raw) -> Path:
    """Resolve a job path and refuse anything outside the scratch directory."""
    if not isinstance(raw, str) or not raw:
        raise JobError(f"bad path in job document: {raw!r}")
    candidate = Path(raw)
    if not candidate.is_absolute():
        candidate = scratch / candidate
    resolved = candidate.resolve()
    if not resolved.is_relative_to(scratch):
        raise JobError(f"path escapes the scratch directory: {raw}")
    return resolved


@dataclass
class RunnerJob:
    """One unit of work: code, its entry point, and what to hand that entry."""

    mode: str  # "multi" | "single"
    code: str
    entry: str
    scratch: Path
    inputs: list[Path] = field(default_factory=list)  # multi: table payloads
    db_path: Path | None = None  # single
    wall_timeout_s: float = DEFAULT_WALL_TIMEOUT
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    no_network: bool = True

    @classmethod
    def from_json_obj(cls, doc, scratch: Path) -> "RunnerJob":
        if not isinstance(doc, dict):
            raise JobError("job document must be a JSON object")
        mode = doc.get("mode")
        if mode not in ("multi", "single"):
            raise JobError(f"bad mode: {mode!r}")
        code = doc.get("code")
        if not isinstance(code, str) or not code.strip():
            raise JobError("job needs non-empty code")
        entry = doc.get("entry", "compute_result")
        if not isinstance(entry, str) or not entry.isidentifier():
            raise JobError(f"bad entry name: {entry!r}")
        limits = doc.get("limits")
        if limits is None:
            limits = {}
        if not isinstance(limits, dict):
            raise JobError("limits must be a JSON object")
        try:
            wall = float(limits.get("wall_timeout_s", DEFAULT_WALL_TIMEOUT))
            memory = int(limits.get("memory_bytes", DEFAULT_MEMORY_BYTES))
        except (TypeError, ValueError) as exc:
            raise JobError(f"bad limits: {exc}") from None
        if wall <= 0 or memory <= 0:
            raise JobError("limits must be positive")
        scratch = scratch.resolve()
        job = cls(
            mode=mode,
            code=code,
            entry=entry,
            scratch=scratch,
            wall_timeout_s=wall,
            memory_bytes=memory,
            no_network=bool(limits.get("no_network", True)),
        )
        if mode == "multi":
            raw_inputs = doc.get("inputs")
            if not isinstance(raw_inputs, list):
                raise JobError("multi mode needs an inputs list")
            job.inputs = [_contained(scratch, p) for p in raw_inputs]
        else:
            raw_db = doc.get("db_path")
            job.db_path = _contained(scratch, raw_db)
        return job


def _scrub_environment(scratch: Path) -> None:
    kept = {k: v for k, v in os.environ.items() if k in ENV_ALLOWLIST}
    os.environ.clear()
    os.environ.update(kept)
    for name in ("HOME", "TMPDIR", "TEMP", "TMP"):
        os.environ[name] = str(scratch)


def _apply_resource_limits(job: RunnerJob) -> None:
    try:
        import resource
    except ImportError:  # non-POSIX platform: the wall alarm still applies
        return
    # CPU limit backstops the wall alarm for loops stuck inside C extensions
    # where the signal handler cannot run; at the hard limit the kernel kills
    # the process and the client reports the missing result document.
    cpu_soft = int(job.wall_timeout_s) + 2
    for rlimit, bounds in (
        (resource.RLIMIT_AS, (job.memory_bytes, job.memory_bytes)),
        (resource.RLIMIT_CPU, (cpu_soft, cpu_soft + 5)),
    ):
        try:
            resource.setrlimit(rlimit, bounds)
        except (OSError, ValueError):
            pass  # a tighter system limit is already in place


def _disable_network() -> None:
    """Best-effort network removal: every socket constructor raises."""
    import socket

    def _blocked(*_args, **_kwargs):
        raise OSError("network access is disabled inside the sandbox")

    socket.socket = _blocked  # type: ignore[misc]
    socket.socketpair = _blocked
    socket.create_connection = _blocked
    socket.fromfd = _blocked
    if hasattr(socket, "create_server"):
        socket.create_server = _blocked
    if hasattr(socket, "fromshare"):
        socket.fromshare = _blocked


def _arm_wall_clock(seconds: float) -> None:
    if not hasattr(signal, "setitimer"):
        return

    def _on_deadline(_signum, _frame):
        raise _WallTimeout()

    signal.signal(signal.SIGALRM, _on_deadline)
    if hasattr(signal, "SIGXCPU"):
        signal.signal(signal.SIGXCPU, _on_deadline)
    signal.setitimer(signal.ITIMER_REAL, seconds)


def _disarm_wall_clock() -> None:
    if not hasattr(signal, "setitimer"):
        return
    try:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
    except (OSError, ValueError):
        pass


def _materialize_table(path: Path):
    """Build a DataFrame from a table payload.

    Column names are kept exactly as serialized.  Dtype hints guide numeric
    parsing: a hinted column converts only when every non-null value parses
    as a number; text never turns into numbers (or NaN) silently.  Nulls stay
    visible — object columns keep None, hinted int columns go nullable.
    """
    import pandas as pd  # deferred so single-mode jobs stay lean

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    names = [c["name"] for c in doc["columns"]]
    hints = [c.get("dtype", "object") for c in doc["columns"]]
    rows = [list(r) for r in doc["rows"]]
    frame = pd.DataFrame(rows if rows else None, columns=names, dtype=object)
    for name, hint in zip(names, hints):
        if hint not in ("int64", "float64") or names.count(name) > 1:
            continue
        try:
            numeric = pd.to_numeric(frame[name], errors="raise")
        except (ValueError, TypeError):
            continue  # non-numeric text present: leave the column untouched
        if hint == "int64":
            numeric = numeric.astype("Int64" if numeric.isna().any() else "int64")
        frame[name] = numeric
    return frame


def _db_argument(job: RunnerJob) -> Path:
    """The database path handed to user code, guaranteed non-destructive.

    File permissions only bind when some other user owns the file; an owner
    (or root) can always chmod and reopen it read-write.  When permissions
    cannot enforce read-only access, user code gets a private copy instead.
    """
    db_path = job.db_path
    assert db_path is not None
    stat_result = os.stat(db_path)
    enforced = (
        os.geteuid() != 0
        and stat_result.st_uid != os.geteuid()
        and not os.access(db_path, os.W_OK)
    )
    if enforced:
        return db_path
    private = job.scratch / f".runner_db{db_path.suffix}"
    if private.exists():
        private.chmod(0o644)
        private.unlink()
    shutil.copyfile(db_path, private)
    private.chmod(0o444)
    return private


def _load_arguments(job: RunnerJob) -> tuple:
    if job.mode == "multi":
        return ([_materialize_table(path) for path in job.inputs],)
    return (str(_db_argument(job)),)


def run_job(job: RunnerJob) -> dict:
    """Run the job in this process and return the result document.

    Destructive on purpose (environment, working directory, rlimits): call
    it only from a process that exists to run this one job.
    """
    started = time.monotonic()
    stdout_buffer = io.StringIO()
    _scrub_environment(job.scratch)
    os.chdir(job.scratch)
    _apply_resource_limits(job)
    if job.no_network:
        _disable_network()
    _arm_wall_clock(job.wall_timeout_s)
    try:
        arguments = _load_arguments(job)
        namespace: dict = {"__name__": "__generated__"}
        with redirect_stdout(stdout_buffer):
            exec(compile(job.code, "<generated>", "exec"), namespace)
            entry = namespace.get(job.entry)
            if not callable(entry):
                raise NameError(f"entry function {job.entry!r} is not defined")
            returned = entry(*arguments)
        try:
            result_text = serialize_answer(returned)
        except UnserializableReturn:
            scraped = stdout_buffer.getvalue().strip()
            if not scraped:
                raise
            result_text = scraped  # fall back to whatever the code printed
        document = {"outcome": "ok", "result_text": result_text[:RESULT_TEXT_CAP]}
    except _WallTimeout:
        document = {"outcome": "timeout"}
    except MemoryError:
        document = {"outcome": "oom"}
    except UnserializableReturn as exc:
        document = {
            "outcome": "exec_error",
            "error": {
                "type": "UnserializableReturn",
                "message": str(exc),
                "traceback": "",
            },
        }
    except BaseException as exc:  # every other failure becomes a document
        document = {
            "outcome": "exec_error",
            "error": {
                "type": type(exc).__name__,
                "message": str(exc),
                "traceback": traceback.format_exc(),
            },
        }
    finally:
        _disarm_wall_clock()
    document["duration_ms"] = int((time.monotonic() - started) * 1000)
    stdout_text = stdout_buffer.getvalue()
    if stdout_text:
        document["stdout"] = stdout_text[:STDOUT_CAP]
    return document


# Extra wall time the watchdog grants the child beyond the job's own alarm,
# so the in-process timeout (which reports a precise duration) wins when the
# user code is interruptible at all.
WATCHDOG_MARGIN_S = 1.5


def _write_result(path: Path, document: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(document, fh, ensure_ascii=False)
    os.replace(tmp, path)


def _run_with_watchdog(job: RunnerJob, result_path: Path) -> int:
    """Fork, run the job in the child, and kill it at the deadline.

    The in-process alarm cannot fire while user code spins inside a tight
    ``try``/``except`` loop (the interpreter may never reach a point where it
    runs Python-level signal handlers), so the parent holds a kernel-enforced
    backstop: SIGKILL at wall_timeout plus a small margin.
    """
    started = time.monotonic()
    pid = os.fork()
    if pid == 0:
        # Child: never return into the parent's code path.
        status = 1
        try:
            document = run_job(job)
            _write_result(result_path, document)
            status = 0
        finally:
            os._exit(status)

    killed_by_watchdog = False

    def _on_deadline(_signum, _frame):
        nonlocal killed_by_watchdog
        killed_by_watchdog = True
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass

    previous = signal.signal(signal.SIGALRM, _on_deadline)
    signal.setitimer(signal.ITIMER_REAL, job.wall_timeout_s + WATCHDOG_MARGIN_S)
    try:
        while True:
            try:
                _, wait_status = os.waitpid(pid, 0)
                break
            except InterruptedError:
                continue
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, previous)

    if result_path.exists():
        return EXIT_OK
    duration_ms = int((time.monotonic() - started) * 1000)
    if killed_by_watchdog:
        document = {"outcome": "timeout", "duration_ms": duration_ms}
    else:
        if os.WIFSIGNALED(wait_status):
            detail = f"runner child died with signal {os.WTERMSIG(wait_status)}"
        else:
            detail = f"runner child exited {os.WEXITSTATUS(wait_status)} without a result"
        document = {
            "outcome": "exec_error",
            "error": {"type": "RunnerChildDied", "message": detail, "traceback": ""},
            "duration_ms": duration_ms,
        }
    try:
        _write_result(result_path, document)
    except OSError as exc:
        print(f"cannot write result document: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE_RESULT
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if len(argv) != 1:
        print("usage: tandem-runner <job.json>", file=sys.stderr)
        return EXIT_USAGE
    job_path = Path(argv[0]).resolve()
    try:
        document = json.loads(job_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        print(f"cannot read job document: {exc}", file=sys.stderr)
        return EXIT_BAD_JOB
    try:
        job = RunnerJob.from_json_obj(document, scratch=job_path.parent)
    except JobError as exc:
        print(f"bad job document: {exc}", file=sys.stderr)
        return EXIT_BAD_JOB
    result_path = job_path.with_name(job_path.stem + ".result.json")
    if hasattr(os, "fork"):
        return _run_with_watchdog(job, result_path)
    result = run_job(job)
    try:
        _write_result(result_path, result)
    except OSError as exc:
        print(f"cannot write result document: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE_RESULT
    return EXIT_OK
