"""Prompt construction from templates and parsing of structured model output."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .schema import DbSchemaContext, render_context

log = logging.getLogger(__name__)

FORMAT_INSTRUCTION = (
    "Report the final answer as a list of tuples"
    " without any additional names or descriptions."
)

PROMPT_KINDS = (
    "text2sql",
    "decomposer",
    "text2python",
    "single_shot",
    "knowledge",
    "repair_sql",
    "repair_code",
    "repair_decomposer",
)

_COMMON_PLACEHOLDERS = ("schema", "format_rules", "exemplars", "question")
_EXTRA_PLACEHOLDERS = {
    "text2python": ("decomposition", "shapes"),
    "repair_sql": ("artifact", "error"),
    "repair_code": ("artifact", "error"),
    "repair_decomposer": ("artifact", "error"),
}


class TemplateError(RuntimeError):
    pass


class MissingExtras(ValueError):
    def __init__(self, kind: str, name: str):
        super().__init__(f"prompt kind {kind!r} requires extras[{name!r}]")
        self.kind = kind
        self.name = name


class NoBlockFound(ValueError):
    pass


class DecompositionError(ValueError):
    pass


class NoMarker(DecompositionError):
    pass


class NoSqlSteps(DecompositionError):
    pass


def required_placeholders(kind: str) -> tuple[str, ...]:
    return _COMMON_PLACEHOLDERS + _EXTRA_PLACEHOLDERS.get(kind, ())


_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_templates: dict[str, str] | None = None


def load_templates() -> dict[str, str]:
    """Read and validate every template file once; bad templates fail startup."""
    global _templates
    if _templates is not None:
        return _templates
    loaded: dict[str, str] = {}
    root = resources.files("tandem").joinpath("templates")
    for kind in PROMPT_KINDS:
        try:
            text = root.joinpath(f"{kind}.txt").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise TemplateError(f"missing template file: templates/{kind}.txt") from None
        found = set(_PLACEHOLDER_RE.findall(text))
        missing = set(required_placeholders(kind)) - found
        if missing:
            raise TemplateError(
                f"template {kind}.txt lacks placeholders: {sorted(missing)}"
            )
        unknown = found - set(required_placeholders(kind))
        if unknown:
            raise TemplateError(
                f"template {kind}.txt has unknown placeholders: {sorted(unknown)}"
            )
        loaded[kind] = text
    _templates = loaded
    return loaded


@dataclass(frozen=True)
class Step:
    kind: str  # "sql" | "code"
    text: str


@dataclass
class Decomposition:
    steps: list[Step]
    cot_preamble: str = ""

    @property
    def sql_steps(self) -> list[Step]:
        return [s for s in self.steps if s.kind == "sql"]

    @property
    def code_steps(self) -> list[Step]:
        return [s for s in self.steps if s.kind == "code"]


def render_decomposition(d: Decomposition) -> str:
    lines = ["Decomposition:"]
    for step in d.steps:
        prefix = "Text2SQL: " if step.kind == "sql" else "Python: "
        lines.append(prefix + step.text)
    return "\n".join(lines)


_DEPENDENCY_RE = re.compile(r"previous step|identified above", re.IGNORECASE)


def parse_decomposition(text: str) -> Decomposition:
    """Split model output at the "Decomposition:" marker into tagged steps.

    Lines with neither prefix are skipped with a warning; SQL steps that look
    dependent on other steps are logged but kept.
    """
    marker = None
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.strip().startswith("Decomposition:"):
            marker = i
            break
    if marker is None:
        raise NoMarker("no 'Decomposition:' line in output")
    cot_preamble = "\n".join(lines[:marker])
    steps: list[Step] = []
    first = lines[marker].strip()[len("Decomposition:"):].strip()
    body = ([first] if first else []) + lines[marker + 1:]
    for line in body:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("Text2SQL:"):
            kind, step_text = "sql", stripped[len("Text2SQL:"):].strip()
        elif stripped.startswith("Python:"):
            kind, step_text = "code", stripped[len("Python:"):].strip()
        else:
            log.warning("skipping unrecognized decomposition line: %r", stripped)
            continue
        if not step_text:
            log.warning("skipping empty decomposition step: %r", stripped)
            continue
        if kind == "sql" and _DEPENDENCY_RE.search(step_text):
            log.warning("SQL step looks dependent on another step: %r", step_text)
        steps.append(Step(kind=kind, text=step_text))
    if not any(s.kind == "sql" for s in steps):
        raise NoSqlSteps("decomposition has no Text2SQL step")
    return Decomposition(steps=steps, cot_preamble=cot_preamble)


def render_prompt(
    kind: str,
    ctx: DbSchemaContext | str,
    question: str,
    extras: dict | None = None,
) -> str:
    """Fill the template for `kind`; deterministic for fixed inputs.

    extras may carry: step (replaces question for multi-mode SQL), exemplars,
    format_notes, decomposition, shapes, artifact, error.
    """
    templates = load_templates()
    if kind not in templates:
        raise ValueError(f"unknown prompt kind: {kind!r}")
    extras = extras or {}
    schema_text = ctx if isinstance(ctx, str) else render_context(ctx)
    format_rules = FORMAT_INSTRUCTION
    notes = extras.get("format_notes", "")
    if notes:
        format_rules += "\n" + notes.strip()
    values: dict[str, str] = {
        "schema": schema_text.rstrip("\n"),
        "format_rules": format_rules,
        "exemplars": extras.get("exemplars", ""),
        "question": extras.get("step", question),
    }
    for name in _EXTRA_PLACEHOLDERS.get(kind, ()):
        if name not in extras:
            raise MissingExtras(kind, name)
        value = extras[name]
        if name == "decomposition" and isinstance(value, Decomposition):
            value = render_decomposition(value)
        if name == "shapes" and isinstance(value, (list, tuple)):
            value = "\n\n".join(
                v if isinstance(v, str) else v.text for v in value
            )
        values[name] = str(value)
    return templates[kind].format_map(values)


_FENCE_RE = re.compile(r"```(.*?)```", re.DOTALL)
# Info strings are short lowercase language words; anything else means the
# first line is content and the block is bare.
_INFO_WORD_RE = re.compile(r"[a-z][a-z0-9_+-]{0,14}$")


def _classify_block(inner: str) -> tuple[str | None, str]:
    """Return (info tag or None for bare, body)."""
    head, sep, rest = inner.partition("\n")
    first_token, _, remainder = head.strip().partition(" ")
    if _INFO_WORD_RE.match(first_token):
        body = remainder.strip()
        if sep:
            body = (body + "\n" + rest) if body else rest
        return first_token, body.strip("\n")
    return None, inner.strip("\n")


def extract_fenced(text: str, tag: str) -> str:
    """Content of the LAST block fenced with `tag`; bare-block fallback."""
    if tag not in ("sql", "python"):
        raise ValueError(f"unsupported fence tag: {tag!r}")
    tagged: list[str] = []
    bare: list[str] = []
    for match in _FENCE_RE.finditer(text):
        info, body = _classify_block(match.group(1))
        if info == tag:
            tagged.append(body)
        elif info is None:
            bare.append(body)
    if tagged:
        return tagged[-1].strip()
    if bare:
        return bare[-1].strip()
    raise NoBlockFound(f"no ```{tag}``` or bare fenced block in model output")


class ExemplarStore:
    """Few-shot examples keyed by database then prompt kind.

    pick_for never returns the question's own database's examples.
    """

    def __init__(self, by_db: dict[str, dict[str, str]] | None = None):
        self.by_db = by_db or {}

    @classmethod
    def load(cls, path: str | Path) -> "ExemplarStore":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def pick_for(self, db_id: str, kind: str) -> str:
        for other in sorted(self.by_db):
            if other == db_id:
                continue
            if kind in self.by_db[other]:
                return self.by_db[other][kind]
        if db_id in self.by_db and kind in self.by_db[db_id]:
            log.warning(
                "only same-domain exemplars available for db %s kind %s; omitting",
                db_id,
                kind,
            )
        return ""


@dataclass
class PromptSettings:
    """Per-question bundle the pipelines thread through render_prompt."""

    schema_text: str
    format_notes: str = ""
    exemplars: "ExemplarStore" = field(default_factory=ExemplarStore)
    db_id: str = ""

    def extras_for(self, kind: str, **overrides) -> dict:
        extras = {
            "exemplars": self.exemplars.pick_for(self.db_id, kind),
            "format_notes": self.format_notes,
        }
        extras.update(overrides)
        return extras
