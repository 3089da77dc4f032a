import hashlib
import json
import socket
from pathlib import Path

import pytest

from tandem.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main


def run_cli(*argv):
    return main([str(a) for a in argv])


def run_traces(bench, out, runs=3, workers=1, method=None, extra=()):
    paths = bench["paths"]
    code = run_cli(
        "run",
        "--dataset", paths["dataset"],
        "--db-registry", paths["registry"],
        "--method", method or "t2sc-multi",
        "--runs", runs,
        "--backend", f"scripted:{paths['script']}",
        "--workers", workers,
        "--out", out,
        *extra,
    )
    return code, Path(out) / "traces" / (method or "t2sc-multi")


def digest_dir(trace_dir):
    return {
        f.name: hashlib.sha256(f.read_bytes()).hexdigest()
        for f in sorted(trace_dir.glob("run*.jsonl"))
    }


class TestRunCommand:
    def test_end_to_end_benchmark(self, bench, tmp_path):
        code, trace_dir = run_traces(bench, tmp_path / "out")
        assert code == EXIT_OK
        files = sorted(trace_dir.glob("run*.jsonl"))
        assert [f.name for f in files] == ["run0.jsonl", "run1.jsonl", "run2.jsonl"]
        lines = files[0].read_text(encoding="utf-8").splitlines()
        assert len(lines) == 10
        ids = [json.loads(line)["question_id"] for line in lines]
        assert ids == [q.id for q in bench["questions"]]  # dataset order
        assert not (tmp_path / "out" / "resume.json").exists()
        assert not (tmp_path / "out" / "scratch").exists()

    def test_worker_count_does_not_change_bytes(self, bench, tmp_path):
        digests = []
        for i, workers in enumerate((1, 4)):
            code, trace_dir = run_traces(bench, tmp_path / f"o{i}", workers=workers)
            assert code == EXIT_OK
            digests.append(digest_dir(trace_dir))
        assert digests[0] == digests[1]

    def test_rerun_is_idempotent(self, bench, tmp_path):
        code, trace_dir = run_traces(bench, tmp_path / "out")
        assert code == EXIT_OK
        before = digest_dir(trace_dir)
        code, _ = run_traces(bench, tmp_path / "out")
        assert code == EXIT_OK
        assert digest_dir(trace_dir) == before

    def test_resume_extends_earlier_partial_output(self, bench, tmp_path):
        code, trace_dir = run_traces(bench, tmp_path / "out", runs=1)
        assert code == EXIT_OK
        first = (trace_dir / "run0.jsonl").read_bytes()
        code, _ = run_traces(bench, tmp_path / "out", runs=3)
        assert code == EXIT_OK
        assert (trace_dir / "run0.jsonl").read_bytes() == first
        assert (trace_dir / "run2.jsonl").is_file()
        fresh_dir = tmp_path / "fresh"
        code, fresh_traces = run_traces(bench, fresh_dir)
        assert digest_dir(trace_dir) == digest_dir(fresh_traces)

    def test_scripted_run_touches_no_network(self, bench, tmp_path, monkeypatch):
        def refuse(*args, **kwargs):
            raise AssertionError("network access attempted during scripted run")

        monkeypatch.setattr(socket.socket, "connect", refuse)
        code, _ = run_traces(bench, tmp_path / "out", runs=1)
        assert code == EXIT_OK

    def test_replay_log_can_drive_a_rerun(self, bench, tmp_path):
        code, trace_dir = run_traces(bench, tmp_path / "a", runs=1)
        assert code == EXIT_OK
        replay = tmp_path / "a" / "replay.jsonl"
        assert replay.is_file()
        paths = bench["paths"]
        # The q3/q4/q5/q7/q10 answers need the stub sandbox, whose results live
        # in the script book, not the replay log; point the rerun at a script
        # for sandbox docs is not possible, so replay only the SQL-only subset.
        subset = tmp_path / "subset.jsonl"
        keep = {"q01", "q02", "q06", "q09"}
        with open(paths["dataset"], "r", encoding="utf-8") as fh, open(
            subset, "w", encoding="utf-8"
        ) as out:
            for line in fh:
                if json.loads(line)["id"] in keep:
                    out.write(line)
        code = run_cli(
            "run",
            "--dataset", subset,
            "--db-registry", paths["registry"],
            "--method", "t2sc-multi",
            "--runs", 1,
            "--backend", f"replay:{replay}",
            "--out", tmp_path / "b",
        )
        assert code == EXIT_OK
        replayed = {
            json.loads(line)["question_id"]: line
            for line in (tmp_path / "b" / "traces" / "t2sc-multi" / "run0.jsonl")
            .read_text(encoding="utf-8")
            .splitlines()
        }
        original = {
            json.loads(line)["question_id"]: line
            for line in (trace_dir / "run0.jsonl").read_text(encoding="utf-8").splitlines()
        }
        for qid in keep:
            assert replayed[qid] == original[qid]

    def test_unknown_method_is_config_error(self, bench, tmp_path):
        code, _ = run_traces(bench, tmp_path / "out", method="telepathy")
        assert code == EXIT_CONFIG

    def test_missing_dataset_is_config_error(self, bench, tmp_path):
        paths = bench["paths"]
        code = run_cli(
            "run",
            "--dataset", tmp_path / "nope.jsonl",
            "--db-registry", paths["registry"],
            "--method", "text2sql",
            "--backend", f"scripted:{paths['script']}",
            "--out", tmp_path / "out",
        )
        assert code == EXIT_CONFIG

    def test_bad_backend_spec_is_config_error(self, bench, tmp_path):
        paths = bench["paths"]
        code = run_cli(
            "run",
            "--dataset", paths["dataset"],
            "--db-registry", paths["registry"],
            "--method", "text2sql",
            "--backend", "smoke-signals",
            "--out", tmp_path / "out",
        )
        assert code == EXIT_CONFIG

    def test_question_with_unregistered_db_is_config_error(self, bench, tmp_path):
        paths = bench["paths"]
        rogue = tmp_path / "rogue.jsonl"
        rogue.write_text(
            json.dumps(
                {"id": "qX", "db_id": "atlantis", "question": "?", "answer": [["1"]]}
            )
            + "\n",
            encoding="utf-8",
        )
        code = run_cli(
            "run",
            "--dataset", rogue,
            "--db-registry", paths["registry"],
            "--method", "text2sql",
            "--backend", f"scripted:{paths['script']}",
            "--out", tmp_path / "out",
        )
        assert code == EXIT_CONFIG

    def test_partial_failure_writes_resume_manifest(self, bench, tmp_path):
        # An empty script book exhausts immediately for every question, so
        # every (question, run) pair fails and the run is partial.
        empty_script = tmp_path / "empty.json"
        empty_script.write_text(
            json.dumps({"questions": {}, "default": {}}), encoding="utf-8"
        )
        paths = bench["paths"]
        code = run_cli(
            "run",
            "--dataset", paths["dataset"],
            "--db-registry", paths["registry"],
            "--method", "text2sql",
            "--runs", 1,
            "--backend", f"scripted:{empty_script}",
            "--out", tmp_path / "out",
        )
        assert code == EXIT_PARTIAL
        manifest = json.loads((tmp_path / "out" / "resume.json").read_text())
        assert len(manifest["pending"]) == 10
        assert manifest["method"] == "text2sql"


class TestEvalCommand:
    def test_benchmark_scores_seventy(self, bench, tmp_path, capsys):
        code, trace_dir = run_traces(bench, tmp_path / "out")
        assert code == EXIT_OK
        paths = bench["paths"]
        code = run_cli(
            "eval",
            "--traces", trace_dir,
            "--dataset", paths["dataset"],
            "--out", tmp_path / "eval",
        )
        assert code == EXIT_OK
        printed = capsys.readouterr().out
        assert "t2sc-multi: overall 70.0 (calls 3.3)" in printed
        doc = json.loads((tmp_path / "eval" / "report.json").read_text())
        method = doc["methods"]["t2sc-multi"]
        assert method["overall"] == 70.0
        assert method["mean_calls"] == 3.3
        assert method["runs_averaged"] == 3
        assert (tmp_path / "eval" / "report.md").read_text().startswith("| Method |")

    def test_eval_missing_traces_is_config_error(self, bench, tmp_path):
        code = run_cli(
            "eval",
            "--traces", tmp_path / "missing",
            "--dataset", bench["paths"]["dataset"],
            "--out", tmp_path / "eval",
        )
        assert code == EXIT_CONFIG


class TestRoutingCommand:
    def write_reference(self, bench, path):
        """A hand-built Text2SQL reference run: correct on exactly 5 of 10."""
        correct = {"q01", "q02", "q05", "q06", "q07"}
        lines = []
        for q in bench["questions"]:
            doc = {
                "question_id": q.id,
                "method": "text2sql",
                "run_index": 0,
                "prediction": (
                    {"answer": q.gold.to_json_obj()}
                    if q.id in correct
                    else {"failure": True}
                ),
                "llm_calls": 1,
                "used_python": False,
                "routed_to_t2sc": None,
            }
            lines.append(json.dumps(doc, sort_keys=True))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return correct

    def test_routing_report(self, bench, tmp_path, capsys):
        code, trace_dir = run_traces(bench, tmp_path / "out", runs=1)
        assert code == EXIT_OK
        ref_file = tmp_path / "reference-run0.jsonl"
        self.write_reference(bench, ref_file)
        code = run_cli(
            "routing",
            "--t2sc", trace_dir,
            "--t2sql", ref_file,
            "--dataset", bench["paths"]["dataset"],
            "--out", tmp_path / "routing",
        )
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "routing" / "routing.json").read_text())
        assert doc["n_questions"] == 10
        assert doc["n_reference_correct"] == 5
        # q03 q04 q05 q07 q10 invoke the sandbox in the scripted benchmark.
        assert doc["pct_python_full"] == 50.0
        assert "python usage" in capsys.readouterr().out


class TestOracleCommand:
    def test_oracle_of_identical_sets_equals_components(self, bench, tmp_path, capsys):
        code, trace_dir = run_traces(bench, tmp_path / "out", runs=2)
        assert code == EXIT_OK
        code = run_cli(
            "oracle",
            "--a", trace_dir,
            "--b", trace_dir,
            "--dataset", bench["paths"]["dataset"],
            "--out", tmp_path / "oracle",
        )
        assert code == EXIT_OK
        assert "oracle 70.0 (a 70.0, b 70.0)" in capsys.readouterr().out
        doc = json.loads((tmp_path / "oracle" / "oracle.json").read_text())
        assert doc["dominance_holds"] is True


class TestMinibenchCommand:
    def test_materializes_assets(self, tmp_path, capsys):
        code = run_cli("minibench", "--out", tmp_path / "bench")
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "tandem run" in out
        for name in ("dataset.jsonl", "registry.json", "script.json"):
            assert (tmp_path / "bench" / name).is_file()
