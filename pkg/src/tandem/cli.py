"""Operator entry points: run methods over a dataset, score traces, report."""

from __future__ import annotations

import argparse
import json
import logging
import random
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

from . import minibench
from .answers import MatchConfig
from .coderun import SandboxLimits, StubSandbox, SubprocessSandbox
from .dataset import DbRegistry, load_dataset
from .llm import (
    BackendSpec,
    CallLedger,
    HttpBackend,
    LedgeredBackend,
    RecordingBackend,
    ReplayWriter,
    ScriptBook,
    load_replay_as_scriptbook,
)
from .pipelines import (
    MethodId,
    PipelineEnv,
    ScoredTrace,
    Trace,
    derive_seed,
    run_method,
)
from .prompts import ExemplarStore, PromptSettings, load_templates
from .report import (
    CoverageMismatch,
    UnknownQuestion,
    export_report,
    routing_analysis,
    score_oracle,
    score_traces,
)
from .schema import introspect_schema, render_context

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


class ConfigError(RuntimeError):
    pass


def _match_config(args) -> MatchConfig:
    return MatchConfig(
        numeric_mode=args.numeric_mode,
        rel_tol=args.rel_tol,
        dedupe=args.dedupe,
    )


def _add_match_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--numeric-mode",
        choices=("exact", "epsilon"),
        default="exact",
        help="numeric comparison mode for answer matching",
    )
    parser.add_argument(
        "--rel-tol",
        type=float,
        default=1e-6,
        help="relative tolerance when --numeric-mode epsilon",
    )
    parser.add_argument(
        "--dedupe",
        action="store_true",
        help="compare answers as sets (drop duplicate tuples) instead of multisets",
    )


def _read_trace_file(path: Path) -> list[ScoredTrace]:
    traces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                traces.append(ScoredTrace.from_json_obj(json.loads(line)))
    return traces


def _load_traces(path_text: str) -> list[ScoredTrace]:
    path = Path(path_text)
    if path.is_file():
        return _read_trace_file(path)
    if path.is_dir():
        files = sorted(path.rglob("run*.jsonl"))
        if not files:
            raise ConfigError(f"no run*.jsonl files under {path}")
        traces = []
        for f in files:
            traces.extend(_read_trace_file(f))
        return traces
    raise ConfigError(f"trace path not found: {path}")


def _build_settings(registry: DbRegistry, exemplars: ExemplarStore, k_samples: int):
    settings = {}
    for db_id in registry.db_ids():
        entry = registry.get(db_id)
        ctx = introspect_schema(entry, k_samples=k_samples)
        settings[db_id] = PromptSettings(
            schema_text=render_context(ctx),
            format_notes=entry.format_notes,
            exemplars=exemplars,
            db_id=db_id,
        )
    return settings


def cmd_run(args) -> int:
    try:
        load_templates()
        method = MethodId.parse(args.method)
        questions = load_dataset(args.dataset)
        registry = DbRegistry.load(args.db_registry)
        spec = BackendSpec.parse(args.backend)
        exemplars = (
            ExemplarStore.load(args.exemplars) if args.exemplars else ExemplarStore()
        )
        for q in questions:
            if q.db_id not in registry:
                raise ConfigError(f"question {q.id} references unknown db {q.db_id}")
        if args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    trace_dir = out / "traces" / method.label
    trace_dir.mkdir(parents=True, exist_ok=True)
    scratch_root = out / "scratch"
    match_cfg = _match_config(args)
    limits = SandboxLimits(wall_timeout_s=args.code_timeout)

    script_book = None
    http_backend = None
    if spec.kind == "scripted":
        script_book = ScriptBook.load(spec.path)
    elif spec.kind == "replay":
        script_book = load_replay_as_scriptbook(spec.path)
    else:
        try:
            http_backend = HttpBackend(requests_per_minute=args.rpm)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    settings_by_db = _build_settings(registry, exemplars, args.sample_rows)
    replay_writer = ReplayWriter(out / "replay.jsonl")

    # Resume: (run, qid) pairs already present keep their existing lines.
    existing: dict[tuple[int, str], str] = {}
    for r in range(args.runs):
        run_file = trace_dir / f"run{r}.jsonl"
        if run_file.is_file():
            with open(run_file, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    doc = json.loads(line)
                    existing[(int(doc["run_index"]), doc["question_id"])] = line

    by_id = {q.id: q for q in questions}

    def execute(run_index: int, qid: str) -> str:
        q = by_id[qid]
        entry = registry.get(q.db_id)
        ledger = CallLedger()
        if script_book is not None:
            base = script_book.backend_for(qid, run_index)
            sandbox = StubSandbox(script_book.sandbox_results_for(qid, run_index))
        else:
            base = http_backend
            sandbox = SubprocessSandbox()
        backend = LedgeredBackend(
            RecordingBackend(base, replay_writer, qid, run_index), ledger
        )
        env = PipelineEnv(
            entry=entry,
            settings=settings_by_db[q.db_id],
            backend=backend,
            ledger=ledger,
            sandbox=sandbox,
            scratch_root=scratch_root,
            match_cfg=match_cfg,
            max_repairs=args.max_repairs,
            sql_timeout=args.sql_timeout,
            limits=limits,
        )
        rng = random.Random(derive_seed(args.seed, qid, run_index, method.label))
        trace = run_method(q, env, method, rng, run_index=run_index)
        return json.dumps(
            trace.to_json_obj(include_timings=args.include_timings),
            sort_keys=True,
            ensure_ascii=False,
        )

    pending = [
        (r, q.id)
        for r in range(args.runs)
        for q in questions
        if (r, q.id) not in existing
    ]
    results: dict[tuple[int, str], str] = dict(existing)
    failures: dict[tuple[int, str], str] = {}
    if pending:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            futures = {
                pool.submit(execute, r, qid): (r, qid) for r, qid in pending
            }
            for future in as_completed(futures):
                key = futures[future]
                try:
                    results[key] = future.result()
                except Exception as exc:  # noqa: BLE001 - report, don't crash
                    log.error("question %s run %d failed: %s", key[1], key[0], exc)
                    failures[key] = f"{type(exc).__name__}: {exc}"
    replay_writer.close()

    # Trace lines go out in dataset order so worker scheduling cannot
    # change the bytes.
    for r in range(args.runs):
        lines = [
            results[(r, q.id)] for q in questions if (r, q.id) in results
        ]
        with open(trace_dir / f"run{r}.jsonl", "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    if scratch_root.exists():
        shutil.rmtree(scratch_root, ignore_errors=True)

    resume_path = out / "resume.json"
    if failures:
        manifest = {
            "method": method.label,
            "pending": sorted([r, qid] for (r, qid) in failures),
            "errors": {f"{qid}@{r}": msg for (r, qid), msg in sorted(failures.items())},
        }
        resume_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(
            f"partial run: {len(failures)} of {args.runs * len(questions)}"
            f" (question, run) pairs failed; resume manifest at {resume_path}",
            file=sys.stderr,
        )
        return EXIT_PARTIAL
    if resume_path.exists():
        resume_path.unlink()
    print(
        f"wrote {args.runs} run file(s) for {len(questions)} questions"
        f" under {trace_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        questions = load_dataset(args.dataset)
        traces = _load_traces(args.traces)
        report = score_traces(traces, questions, _match_config(args))
    except (OSError, ValueError, KeyError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(export_report(report, "json"), encoding="utf-8")
    (out / "report.md").write_text(
        export_report(report, "markdown-table"), encoding="utf-8"
    )
    for label, m in sorted(report.methods.items()):
        print(f"{label}: overall {m.overall:.1f} (calls {m.mean_calls:.1f})")
    return EXIT_OK


def cmd_routing(args) -> int:
    try:
        questions = load_dataset(args.dataset)
        t2sc = _load_traces(args.t2sc)
        reference = _load_traces(args.t2sql)
        table = routing_analysis(
            t2sc, reference, questions, _match_config(args), args.reference_run
        )
    except (OSError, ValueError, KeyError, ConfigError, UnknownQuestion) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "routing.json").write_text(
        json.dumps(table.to_json_obj(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(
        f"python usage: full {table.pct_full:.1f},"
        f" on-correct {table.delta_correct:+.1f},"
        f" on-incorrect {table.delta_incorrect:+.1f}"
    )
    return EXIT_OK


def cmd_oracle(args) -> int:
    try:
        questions = load_dataset(args.dataset)
        traces_a = _load_traces(args.a)
        traces_b = _load_traces(args.b)
        result = score_oracle(traces_a, traces_b, questions, _match_config(args))
    except (OSError, ValueError, KeyError, ConfigError, UnknownQuestion) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text(
            json.dumps(result.to_json_obj(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    print(
        f"oracle {result.oracle_overall:.1f}"
        f" (a {result.a_overall:.1f}, b {result.b_overall:.1f})"
    )
    return EXIT_OK


def cmd_minibench(args) -> int:
    paths = minibench.build(args.out)
    print(f"mini benchmark written to {Path(args.out).resolve()}")
    print(
        "run it with: tandem run"
        f" --dataset {paths['dataset']} --db-registry {paths['registry']}"
        f" --method {minibench.EXPECTED_METHOD} --runs 3"
        f" --backend scripted:{paths['script']} --out <dir>"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tandem",
        description=(
            "Answer analytical questions over relational databases by composing"
            " generated SQL with generated Python, and score the results."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one method over a dataset")
    p_run.add_argument("--dataset", required=True)
    p_run.add_argument("--db-registry", required=True)
    p_run.add_argument(
        "--method",
        required=True,
        help="knowledge|text2sql|sc:K|t2sc-single|t2sc-multi|hybrid-single|hybrid-multi",
    )
    p_run.add_argument("--runs", type=int, default=3)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument(
        "--backend",
        default="http",
        help="http | scripted:PATH | replay:PATH",
    )
    p_run.add_argument("--sql-timeout", type=float, default=120.0)
    p_run.add_argument("--code-timeout", type=float, default=300.0)
    p_run.add_argument("--max-repairs", type=int, default=3)
    p_run.add_argument("--sample-rows", type=int, default=3)
    p_run.add_argument("--exemplars", default=None, help="exemplar store JSON")
    p_run.add_argument("--rpm", type=float, default=None, help="request rate cap")
    p_run.add_argument("--include-timings", action="store_true")
    _add_match_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score trace files against gold")
    p_eval.add_argument("--traces", required=True, help="trace file or directory")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    _add_match_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_routing = sub.add_parser("routing", help="python-usage routing analysis")
    p_routing.add_argument("--t2sc", required=True)
    p_routing.add_argument("--t2sql", required=True)
    p_routing.add_argument("--dataset", required=True)
    p_routing.add_argument("--out", required=True)
    p_routing.add_argument("--reference-run", type=int, default=0)
    _add_match_flags(p_routing)
    p_routing.set_defaults(func=cmd_routing)

    p_oracle = sub.add_parser("oracle", help="post-hoc best-of-two accuracy")
    p_oracle.add_argument("--a", required=True)
    p_oracle.add_argument("--b", required=True)
    p_oracle.add_argument("--dataset", required=True)
    p_oracle.add_argument("--out", default=None)
    _add_match_flags(p_oracle)
    p_oracle.set_defaults(func=cmd_oracle)

    p_mini = sub.add_parser(
        "minibench", help="materialize the bundled offline benchmark"
    )
    p_mini.add_argument("--out", required=True)
    p_mini.set_defaults(func=cmd_minibench)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
