import json
import threading

import pytest

from tandem.llm import (
    AuthError,
    BackendSpec,
    CallLedger,
    LedgeredBackend,
    LlmRequest,
    RecordingBackend,
    ReplayWriter,
    ScriptBook,
    ScriptExhausted,
    ScriptedBackend,
    TransportError,
    load_replay_as_scriptbook,
)


class TestLlmRequest:
    def test_user_constructor(self):
        req = LlmRequest.user("hello", tag="text2sql")
        assert req.tag == "text2sql"
        assert req.messages[-1] == {"role": "user", "content": "hello"}

    def test_rejects_unknown_tag(self):
        with pytest.raises(ValueError):
            LlmRequest.user("hello", tag="mystery")

    def test_rejects_empty_messages(self):
        with pytest.raises(ValueError):
            LlmRequest(model_id="m", messages=(), tag="text2sql")

    def test_rejects_bad_role(self):
        with pytest.raises(ValueError):
            LlmRequest(
                model_id="m",
                messages=({"role": "robot", "content": "x"},),
                tag="text2sql",
            )


class TestScriptedBackend:
    def test_list_form_replays_in_order(self):
        backend = ScriptedBackend({"text2sql": ["one", "two"]})
        req = LlmRequest.user("p", tag="text2sql")
        assert backend.complete(req).text == "one"
        assert backend.complete(req).text == "two"

    def test_tags_advance_independently(self):
        backend = ScriptedBackend({"text2sql": ["s1", "s2"], "text2python": ["c1"]})
        assert backend.complete(LlmRequest.user("p", tag="text2sql")).text == "s1"
        assert backend.complete(LlmRequest.user("p", tag="text2python")).text == "c1"
        assert backend.complete(LlmRequest.user("p", tag="text2sql")).text == "s2"

    def test_exhaustion_raises(self):
        backend = ScriptedBackend({"text2sql": ["only"]})
        req = LlmRequest.user("p", tag="text2sql")
        backend.complete(req)
        with pytest.raises(ScriptExhausted) as err:
            backend.complete(req)
        assert err.value.tag == "text2sql"

    def test_unknown_tag_is_exhausted_immediately(self):
        backend = ScriptedBackend({})
        with pytest.raises(ScriptExhausted):
            backend.complete(LlmRequest.user("p", tag="knowledge"))

    def test_two_fresh_backends_replay_identically(self):
        script = {"text2sql": ["a", "b"], "repair_sql": ["c"]}
        seq = ["text2sql", "repair_sql", "text2sql"]
        runs = []
        for _ in range(2):
            backend = ScriptedBackend(script)
            runs.append([backend.complete(LlmRequest.user("p", tag=t)).text for t in seq])
        assert runs[0] == runs[1] == ["a", "c", "b"]


class TestLedger:
    def test_counts_by_tag_and_total(self):
        ledger = CallLedger()
        backend = LedgeredBackend(ScriptedBackend({"text2sql": ["a", "b"]}), ledger)
        req = LlmRequest.user("p", tag="text2sql")
        backend.complete(req)
        backend.complete(req)
        assert ledger.total == 2
        assert ledger.by_tag() == {"text2sql": 2}

    def test_raising_call_is_still_counted(self):
        ledger = CallLedger()
        backend = LedgeredBackend(ScriptedBackend({}), ledger)
        with pytest.raises(ScriptExhausted):
            backend.complete(LlmRequest.user("p", tag="text2sql"))
        assert ledger.total == 1

    def test_transport_retries_tracked_separately(self):
        ledger = CallLedger()
        ledger.record_transport_retry()
        assert ledger.total == 0
        assert ledger.transport_retries == 1

    def test_thread_safety(self):
        ledger = CallLedger()
        backend = LedgeredBackend(ScriptedBackend({"text2sql": ["x"] * 400}), ledger)
        req = LlmRequest.user("p", tag="text2sql")

        def worker():
            for _ in range(100):
                backend.complete(req)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert ledger.total == 400


class TestScriptBook:
    def make_book(self):
        return ScriptBook(
            questions={
                "q1@0": {"text2sql": ["run0"]},
                "q1": {"text2sql": ["any-run"]},
            },
            default={"text2sql": ["fallback"]},
        )

    def test_lookup_prefers_run_specific_entry(self):
        book = self.make_book()
        backend = book.backend_for("q1", run=0)
        assert backend.complete(LlmRequest.user("p", tag="text2sql")).text == "run0"

    def test_lookup_falls_back_to_question_then_default(self):
        book = self.make_book()
        assert (
            book.backend_for("q1", run=2).complete(LlmRequest.user("p", tag="text2sql")).text
            == "any-run"
        )
        assert (
            book.backend_for("q9", run=0).complete(LlmRequest.user("p", tag="text2sql")).text
            == "fallback"
        )

    def test_sandbox_results_exposed(self):
        book = ScriptBook(
            questions={"q1": {"text2sql": ["x"], "sandbox": [{"outcome": "ok"}]}}
        )
        assert book.sandbox_results_for("q1", run=0) == [{"outcome": "ok"}]
        assert book.sandbox_results_for("q2", run=0) == []

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps({"questions": {"q1": {"knowledge": ["hi"]}}, "default": {}}),
            encoding="utf-8",
        )
        book = ScriptBook.load(path)
        assert book.backend_for("q1", run=0).complete(
            LlmRequest.user("p", tag="knowledge")
        ).text == "hi"


class TestReplay:
    def test_record_then_replay_round_trip(self, tmp_path):
        log = tmp_path / "replay.jsonl"
        writer = ReplayWriter(log)
        inner = ScriptedBackend({"text2sql": ["first", "second"]})
        recording = RecordingBackend(inner, writer, qid="q1", run=0)
        req = LlmRequest.user("p", tag="text2sql")
        recording.complete(req)
        recording.complete(req)
        writer.close()

        book = load_replay_as_scriptbook(log)
        replayed = book.backend_for("q1", run=0)
        assert replayed.complete(req).text == "first"
        assert replayed.complete(req).text == "second"

    def test_replay_is_worker_order_independent(self, tmp_path):
        log = tmp_path / "replay.jsonl"
        rows = [
            {"qid": "q2", "run": 0, "tag": "text2sql", "index": 0, "response": "B"},
            {"qid": "q1", "run": 0, "tag": "text2sql", "index": 1, "response": "A2"},
            {"qid": "q1", "run": 0, "tag": "text2sql", "index": 0, "response": "A1"},
        ]
        log.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        book = load_replay_as_scriptbook(log)
        req = LlmRequest.user("p", tag="text2sql")
        q1 = book.backend_for("q1", run=0)
        assert [q1.complete(req).text, q1.complete(req).text] == ["A1", "A2"]
        assert book.backend_for("q2", run=0).complete(req).text == "B"


class TestHttpBackend:
    def make_backend(self, monkeypatch, responses, ledger=None):
        import requests

        import tandem.llm as llm

        monkeypatch.setenv("LLM_API_BASE", "http://example.invalid/v1")
        monkeypatch.setenv("LLM_API_KEY", "k")
        monkeypatch.setenv("LLM_MODEL", "m")
        calls = []

        class FakeResponse:
            def __init__(self, status, payload=None):
                self.status_code = status
                self._payload = payload or {}

            def json(self):
                return self._payload

            @property
            def text(self):
                return json.dumps(self._payload)

        def fake_post(url, headers=None, json=None, timeout=None):
            calls.append({"url": url, "payload": json})
            status, payload = responses.pop(0)
            return FakeResponse(status, payload)

        monkeypatch.setattr(requests, "post", fake_post)
        monkeypatch.setattr(llm.time, "sleep", lambda s: None)
        return llm.HttpBackend(ledger=ledger), calls

    def ok_payload(self, text="answer"):
        return {"choices": [{"message": {"content": text}}], "usage": {}}

    def test_successful_call(self, monkeypatch):
        backend, calls = self.make_backend(monkeypatch, [(200, self.ok_payload("hi"))])
        response = backend.complete(LlmRequest.user("p", tag="knowledge"))
        assert response.text == "hi"
        assert calls[0]["url"].endswith("/chat/completions")

    def test_default_temperature_is_omitted(self, monkeypatch):
        backend, calls = self.make_backend(monkeypatch, [(200, self.ok_payload())])
        backend.complete(LlmRequest.user("p", tag="knowledge"))
        assert "temperature" not in calls[0]["payload"]

    def test_explicit_temperature_is_sent(self, monkeypatch):
        backend, calls = self.make_backend(monkeypatch, [(200, self.ok_payload())])
        req = LlmRequest(
            model_id="m",
            messages=({"role": "user", "content": "p"},),
            tag="knowledge",
            temperature=0.7,
        )
        backend.complete(req)
        assert calls[0]["payload"]["temperature"] == 0.7

    def test_retry_on_transient_error_counts_separately(self, monkeypatch):
        ledger = CallLedger()
        backend, calls = self.make_backend(
            monkeypatch, [(500, {}), (429, {}), (200, self.ok_payload("ok"))], ledger=ledger
        )
        wrapped = LedgeredBackend(backend, ledger)
        response = wrapped.complete(LlmRequest.user("p", tag="knowledge"))
        assert response.text == "ok"
        assert len(calls) == 3
        assert ledger.total == 1  # one logical call
        assert ledger.transport_retries == 2

    def test_auth_error_is_not_retried(self, monkeypatch):
        backend, calls = self.make_backend(monkeypatch, [(401, {})])
        with pytest.raises(AuthError):
            backend.complete(LlmRequest.user("p", tag="knowledge"))
        assert len(calls) == 1

    def test_exhausted_retries_raise_transport_error(self, monkeypatch):
        backend, calls = self.make_backend(monkeypatch, [(500, {})] * 4)
        with pytest.raises(TransportError):
            backend.complete(LlmRequest.user("p", tag="knowledge"))
        assert len(calls) == 4  # initial try + 3 transport retries


class TestBackendSpec:
    def test_parse_forms(self):
        assert BackendSpec.parse("http").kind == "http"
        spec = BackendSpec.parse("scripted:/tmp/s.json")
        assert (spec.kind, spec.path) == ("scripted", "/tmp/s.json")
        spec = BackendSpec.parse("replay:/tmp/r.jsonl")
        assert (spec.kind, spec.path) == ("replay", "/tmp/r.jsonl")

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError):
            BackendSpec.parse("carrier-pigeon")
        with pytest.raises(ValueError):
            BackendSpec.parse("scripted:")
