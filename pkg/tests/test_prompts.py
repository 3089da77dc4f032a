import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tandem.prompts import (
    FORMAT_INSTRUCTION,
    PROMPT_KINDS,
    Decomposition,
    ExemplarStore,
    MissingExtras,
    NoBlockFound,
    NoMarker,
    NoSqlSteps,
    PromptSettings,
    Step,
    extract_fenced,
    load_templates,
    parse_decomposition,
    render_decomposition,
    render_prompt,
)

SCHEMA = "CREATE TABLE t (x INTEGER)"
QUESTION = "How many rows are in t?"

FULL_EXTRAS = {
    "text2python": {"decomposition": "Decomposition:\nText2SQL: step", "shapes": "(shape)"},
    "repair_sql": {"artifact": "SELECT 1", "error": "boom"},
    "repair_code": {"artifact": "def f(): pass", "error": "boom"},
    "repair_decomposer": {"artifact": "Decomposition:", "error": "boom"},
}


def render(kind, **extra):
    extras = dict(FULL_EXTRAS.get(kind, {}))
    extras.update(extra)
    return render_prompt(kind, SCHEMA, QUESTION, extras)


class TestTemplates:
    def test_all_templates_load(self):
        templates = load_templates()
        assert set(templates) == set(PROMPT_KINDS)

    @pytest.mark.parametrize("kind", PROMPT_KINDS)
    def test_format_instruction_appears_exactly_once(self, kind):
        text = render(kind)
        assert text.count(FORMAT_INSTRUCTION) == 1

    @pytest.mark.parametrize("kind", PROMPT_KINDS)
    def test_element_order(self, kind):
        exemplar = "Q: example question\nA: example answer"
        text = render(kind, exemplars=exemplar)
        positions = [
            text.index(SCHEMA),
            text.index(FORMAT_INSTRUCTION),
            text.index(exemplar),
            text.index(QUESTION),
        ]
        assert positions == sorted(positions)
        assert positions[0] > 0  # a task description precedes the schema

    @pytest.mark.parametrize("kind", PROMPT_KINDS)
    def test_deterministic(self, kind):
        assert render(kind) == render(kind)

    def test_format_notes_ride_along(self):
        text = render("text2sql", format_notes="Dates use YYYYMMDD.")
        assert FORMAT_INSTRUCTION in text
        assert "Dates use YYYYMMDD." in text
        assert text.index(FORMAT_INSTRUCTION) < text.index("Dates use YYYYMMDD.")

    def test_missing_extras_raise(self):
        with pytest.raises(MissingExtras):
            render_prompt("repair_sql", SCHEMA, QUESTION, {"artifact": "SELECT 1"})
        with pytest.raises(MissingExtras):
            render_prompt("text2python", SCHEMA, QUESTION, {"shapes": "s"})

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            render_prompt("poetry", SCHEMA, QUESTION)

    def test_step_overrides_question_for_multi_sql(self):
        text = render("text2sql", step="Find the lowest x")
        assert "Find the lowest x" in text
        assert QUESTION not in text

    def test_knowledge_prompt_forbids_tools(self):
        text = render("knowledge")
        assert "Do not use SQL or code" in text

    def test_python_prompts_declare_entry_signatures(self):
        multi = render("text2python")
        assert "compute_result(listOfDFs" in multi
        assert "(shape)" in multi
        single = render("single_shot")
        assert "compute_result(db_path)" in single
        assert "print(compute_result(database_path))" in single

    def test_repair_prompts_embed_artifact_and_error(self):
        text = render("repair_sql", artifact="SELECT wrong", error="no such column")
        assert "SELECT wrong" in text
        assert "no such column" in text


class TestExtractFenced:
    def test_last_tagged_block_wins(self):
        text = "chatter\n```sql\nSELECT 1\n```\nmore\n```sql\nSELECT 2\n```\n"
        assert extract_fenced(text, "sql") == "SELECT 2"

    def test_bare_block_fallback(self):
        text = "reasoning\n```\nSELECT 5\n```\n"
        assert extract_fenced(text, "sql") == "SELECT 5"

    def test_tagged_beats_bare(self):
        text = "```\nSELECT bare\n```\n```sql\nSELECT tagged\n```\n"
        assert extract_fenced(text, "sql") == "SELECT tagged"

    def test_other_tag_is_not_bare(self):
        text = "```python\nprint(1)\n```"
        with pytest.raises(NoBlockFound):
            extract_fenced(text, "sql")
        assert extract_fenced(text, "python") == "print(1)"

    def test_inline_info_word(self):
        assert extract_fenced("```sql SELECT 1```", "sql") == "SELECT 1"

    def test_uppercase_first_line_is_content(self):
        # "SELECT" is not a lowercase info word, so the block is bare.
        assert extract_fenced("```SELECT 7 FROM t```", "sql") == "SELECT 7 FROM t"

    def test_no_block_raises(self):
        with pytest.raises(NoBlockFound):
            extract_fenced("no fences at all", "sql")

    def test_bad_tag_rejected(self):
        with pytest.raises(ValueError):
            extract_fenced("```sql\nx\n```", "rust")

    def test_multiline_python_block(self):
        code = "def compute_result(listOfDFs):\n    return [(1,)]"
        text = f"Here is the code:\n```python\n{code}\n```\nDone."
        assert extract_fenced(text, "python") == code


class TestParseDecomposition:
    def test_mixed_steps(self):
        text = (
            "Thinking about the problem first.\n"
            "Decomposition:\n"
            "Text2SQL: Fetch all goals per match.\n"
            "Python: Compute the difference per season.\n"
            "Python: Find the maximum.\n"
        )
        d = parse_decomposition(text)
        assert [s.kind for s in d.steps] == ["sql", "code", "code"]
        assert d.steps[0].text == "Fetch all goals per match."
        assert d.cot_preamble == "Thinking about the problem first."

    def test_sql_only_is_valid(self):
        d = parse_decomposition("Decomposition:\nText2SQL: Count rows.")
        assert [s.kind for s in d.steps] == ["sql"]

    def test_content_on_marker_line(self):
        d = parse_decomposition("Decomposition: Text2SQL: Count rows.")
        assert d.steps == [Step(kind="sql", text="Count rows.")]

    def test_python_only_rejected(self):
        with pytest.raises(NoSqlSteps):
            parse_decomposition("Decomposition:\nPython: Just code.")

    def test_missing_marker_rejected(self):
        with pytest.raises(NoMarker):
            parse_decomposition("Text2SQL: Count rows.")

    def test_unrecognized_lines_skipped_with_warning(self, caplog):
        text = (
            "Decomposition:\n"
            "Step 1 is easy\n"
            "Text2SQL: Count rows.\n"
            "- bullet noise\n"
        )
        with caplog.at_level(logging.WARNING, logger="tandem.prompts"):
            d = parse_decomposition(text)
        assert [s.kind for s in d.steps] == ["sql"]
        assert sum("skipping unrecognized" in r.message for r in caplog.records) == 2

    def test_dependent_sql_step_logged_but_kept(self, caplog):
        text = "Decomposition:\nText2SQL: Use the ids from the previous step."
        with caplog.at_level(logging.WARNING, logger="tandem.prompts"):
            d = parse_decomposition(text)
        assert len(d.sql_steps) == 1
        assert any("dependent" in r.message for r in caplog.records)

    def test_empty_step_skipped(self):
        d = parse_decomposition("Decomposition:\nText2SQL:\nText2SQL: Real step.")
        assert [s.text for s in d.steps] == ["Real step."]

    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["sql", "code"]),
                st.text(
                    alphabet=st.characters(min_codepoint=32, max_codepoint=126),
                    min_size=1,
                ).filter(lambda s: s.strip() and not s.strip().startswith(("Text2SQL:", "Python:"))),
            ),
            min_size=1,
            max_size=6,
        ).filter(lambda steps: any(k == "sql" for k, _ in steps))
    )
    def test_render_parse_round_trip(self, raw_steps):
        d = Decomposition(steps=[Step(kind=k, text=t.strip()) for k, t in raw_steps])
        parsed = parse_decomposition(render_decomposition(d))
        assert parsed.steps == d.steps


class TestExemplarStore:
    STORE = ExemplarStore(
        {
            "alpha": {"text2sql": "A-sql"},
            "beta": {"text2sql": "B-sql", "text2python": "B-py"},
        }
    )

    def test_never_returns_same_db(self):
        assert self.STORE.pick_for("alpha", "text2sql") == "B-sql"
        assert self.STORE.pick_for("beta", "text2sql") == "A-sql"

    def test_empty_when_only_same_db_has_kind(self):
        assert self.STORE.pick_for("beta", "text2python") == ""

    def test_unknown_db_uses_any(self):
        assert self.STORE.pick_for("gamma", "text2sql") == "A-sql"

    def test_settings_thread_exemplars_into_prompt(self):
        settings = PromptSettings(schema_text=SCHEMA, exemplars=self.STORE, db_id="alpha")
        extras = settings.extras_for("text2sql")
        text = render_prompt("text2sql", SCHEMA, QUESTION, extras)
        assert "B-sql" in text
