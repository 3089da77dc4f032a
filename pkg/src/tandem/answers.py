"""Canonical answer values and the order-insensitive matching used for scoring.

Answers are sets of tuples.  Neither the order of tuples nor the order of
values inside a tuple carries meaning, so every value is reduced to a
canonical form and compared as a multiset of multisets.
"""

from __future__ import annotations

import ast
import json
import random
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation, localcontext
from typing import Iterable, Sequence, Union


class ParseError(ValueError):
    """Raised when text cannot be read as a tuple-list answer."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"at offset {position}: {reason}")
        self.position = position
        self.reason = reason


class EmptyInput(ValueError):
    pass


class _Failure:
    """Sentinel for a run that produced no answer; never matches anything."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Failure"

    def __bool__(self):
        return False


FAILURE = _Failure()

Prediction = Union["AnswerSet", _Failure]


def is_failure(value) -> bool:
    return value is FAILURE


# Variant ranks fix the sort order: nulls first, then numbers, then text.
_NULL, _NUMBER, _TEXT = 0, 1, 2

# Tokens that read as a missing value.  The backslash-N form is the raw
# null marker some source databases store in text fields.
_NULL_NAMES = frozenset({"None", "none", "null", "NULL", "Null"})
_NULL_TEXT = "\\N"


def _canonical_decimal_str(d: Decimal) -> str:
    """Exact decimal rendering: no exponent, no trailing zeros, no '+'."""
    if not d.is_finite():
        raise ValueError(f"non-finite number: {d}")
    if d == 0:
        return "0"
    with localcontext() as ctx:
        tup = d.as_tuple()
        # A positive exponent widens the integral form (1E100 -> 101 digits),
        # so the working precision must cover digits plus exponent.
        ctx.prec = max(len(tup.digits) + max(tup.exponent, 0) + 8, 40)
        d = d.normalize()
        if d.as_tuple().exponent > 0:
            d = d.quantize(Decimal(1))
    return format(d, "f")


@dataclass(frozen=True)
class Constituent:
    """One value inside an answer tuple: a number, a piece of text, or null."""

    kind: int
    number: Decimal | None = None
    text: str | None = None

    @classmethod
    def null(cls) -> "Constituent":
        return cls(_NULL)

    @classmethod
    def from_number(cls, value: Decimal | int) -> "Constituent":
        d = value if isinstance(value, Decimal) else Decimal(value)
        if not d.is_finite():
            raise ValueError(f"non-finite number: {d}")
        return cls(_NUMBER, number=Decimal(_canonical_decimal_str(d)))

    @classmethod
    def from_text(cls, value: str) -> "Constituent":
        """Trim and classify text; decimal-shaped strings become numbers.

        The collapse keeps the on-disk form (numbers serialized as exact
        decimal strings) unambiguous when it is read back.
        """
        s = value.strip()
        if s == _NULL_TEXT:
            return cls.null()
        if s:
            try:
                d = Decimal(s)
            except InvalidOperation:
                pass
            else:
                if d.is_finite():
                    return cls.from_number(d)
        return cls(_TEXT, text=s)

    @classmethod
    def from_cell(cls, cell) -> "Constituent":
        """Build from a database/JSON cell value."""
        if cell is None:
            return cls.null()
        if isinstance(cell, bool):
            return cls.from_number(int(cell))
        if isinstance(cell, (int, Decimal)):
            return cls.from_number(cell)
        if isinstance(cell, float):
            return cls.from_number(Decimal(repr(cell)))
        if isinstance(cell, str):
            return cls.from_text(cell)
        raise TypeError(f"unsupported cell type: {type(cell).__name__}")

    @property
    def is_null(self) -> bool:
        return self.kind == _NULL

    def render(self) -> str:
        if self.kind == _NULL:
            return ""
        if self.kind == _NUMBER:
            return _canonical_decimal_str(self.number)
        return self.text

    def sort_key(self):
        if self.kind == _NULL:
            return (_NULL, "")
        if self.kind == _NUMBER:
            return (_NUMBER, self.number)
        return (_TEXT, self.text)

    def json_value(self):
        if self.kind == _NULL:
            return None
        return self.render()

    def __repr__(self):
        if self.kind == _NULL:
            return "Null"
        if self.kind == _NUMBER:
            return f"Number({self.render()})"
        return f"Text({self.text!r})"


class AnswerTuple:
    """A non-empty multiset of constituents, keyed by its sorted values."""

    __slots__ = ("constituents", "key")

    def __init__(self, constituents: Iterable[Constituent]):
        items = tuple(constituents)
        if not items:
            raise ValueError("answer tuple must have at least one constituent")
        self.constituents = items
        self.key = tuple(sorted(c.sort_key() for c in items))

    def __eq__(self, other):
        return isinstance(other, AnswerTuple) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __len__(self):
        return len(self.constituents)

    def __repr__(self):
        return "(" + ", ".join(repr(c) for c in self.constituents) + ")"


class AnswerSet:
    """A multiset of answer tuples with a deterministic canonical key."""

    __slots__ = ("tuples", "key")

    def __init__(self, tuples: Iterable[AnswerTuple] = ()):
        self.tuples = tuple(tuples)
        self.key = tuple(sorted(t.key for t in self.tuples))

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence]) -> "AnswerSet":
        """Each row becomes a tuple; each cell a constituent."""
        return cls(
            AnswerTuple(Constituent.from_cell(c) for c in row) for row in rows
        )

    def to_json_obj(self) -> list:
        """Array-of-arrays form, preserving the stored tuple/value order.

        Numbers become exact-decimal strings, nulls become JSON null; the
        canonical key (not this rendering) is what comparisons use.
        """
        return [[c.json_value() for c in t.constituents] for t in self.tuples]

    def to_json_text(self) -> str:
        return json.dumps(self.to_json_obj(), ensure_ascii=False)

    @classmethod
    def from_json_obj(cls, obj) -> "AnswerSet":
        if not isinstance(obj, list):
            raise ParseError(0, "answer JSON must be an array of arrays")
        tuples = []
        for element in obj:
            if isinstance(element, list):
                if not element:
                    raise ParseError(0, "empty tuple in answer JSON")
                tuples.append(AnswerTuple(Constituent.from_cell(v) for v in element))
            else:
                tuples.append(AnswerTuple([Constituent.from_cell(element)]))
        return cls(tuples)

    @classmethod
    def from_json_text(cls, text: str) -> "AnswerSet":
        try:
            obj = json.loads(text, parse_float=Decimal)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.pos, f"invalid answer JSON: {exc.msg}") from None
        return cls.from_json_obj(obj)

    def __eq__(self, other):
        return isinstance(other, AnswerSet) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __len__(self):
        return len(self.tuples)

    def __repr__(self):
        return "AnswerSet[" + ", ".join(repr(t) for t in self.tuples) + "]"


@dataclass(frozen=True)
class MatchConfig:
    """How two answer sets are compared.

    numeric_mode "exact" compares canonical decimal renderings;
    "epsilon" quantizes numbers to significant digits derived from
    rel_tol before comparing.  dedupe=True switches from multiset to
    set semantics at the tuple level.
    """

    numeric_mode: str = "exact"
    rel_tol: float = 1e-6
    dedupe: bool = False

    def __post_init__(self):
        if self.numeric_mode not in ("exact", "epsilon"):
            raise ValueError(f"unknown numeric_mode: {self.numeric_mode}")
        if self.numeric_mode == "epsilon" and not (0 < self.rel_tol < 1):
            raise ValueError("rel_tol must be in (0, 1)")


DEFAULT_MATCH = MatchConfig()


def _sig_digits(rel_tol: float) -> int:
    import math

    return max(1, round(-math.log10(rel_tol)))


def _quantized_key(c: Constituent, digits: int):
    if c.kind != _NUMBER:
        return c.sort_key()
    d = c.number
    if d == 0:
        return (_NUMBER, Decimal(0))
    with localcontext() as ctx:
        ctx.prec = digits
        q = +d
    return (_NUMBER, q)


def _tuple_keys(aset: AnswerSet, cfg: MatchConfig):
    if cfg.numeric_mode == "exact":
        return [t.key for t in aset.tuples]
    digits = _sig_digits(cfg.rel_tol)
    return [
        tuple(sorted(_quantized_key(c, digits) for c in t.constituents))
        for t in aset.tuples
    ]


def _perfect_matching_exists(left_keys, right_keys) -> bool:
    """Kuhn's augmenting-path matching over tuple-key equality edges."""
    if len(left_keys) != len(right_keys):
        return False
    n = len(left_keys)
    adjacency = [
        [j for j, rk in enumerate(right_keys) if lk == rk] for lk in left_keys
    ]
    match_right = [-1] * n

    def try_augment(i, seen):
        for j in adjacency[i]:
            if j in seen:
                continue
            seen.add(j)
            if match_right[j] == -1 or try_augment(match_right[j], seen):
                match_right[j] = i
                return True
        return False

    return all(try_augment(i, set()) for i in range(n))


def answers_match(pred: AnswerSet, gold: AnswerSet, cfg: MatchConfig = DEFAULT_MATCH) -> bool:
    """True iff pred and gold are the same set of tuples.

    Insensitive to the order of tuples and to the order of values
    within each tuple.
    """
    if cfg.numeric_mode == "exact" and not cfg.dedupe:
        return pred.key == gold.key
    pred_keys = _tuple_keys(pred, cfg)
    gold_keys = _tuple_keys(gold, cfg)
    if cfg.dedupe:
        return set(pred_keys) == set(gold_keys)
    if cfg.numeric_mode == "exact":
        return sorted(pred_keys) == sorted(gold_keys)
    return _perfect_matching_exists(pred_keys, gold_keys)


def predictions_match(a: Prediction, b: Prediction, cfg: MatchConfig = DEFAULT_MATCH) -> bool:
    """answers_match extended to failed runs, which never match anything."""
    if is_failure(a) or is_failure(b):
        return False
    return answers_match(a, b, cfg)


def _group_key(aset: AnswerSet, cfg: MatchConfig):
    keys = _tuple_keys(aset, cfg)
    if cfg.dedupe:
        return frozenset(keys)
    return tuple(sorted(keys))


def majority_answer(
    candidates: Sequence[Prediction],
    rng: random.Random,
    cfg: MatchConfig = DEFAULT_MATCH,
) -> tuple[Prediction, bool]:
    """Plurality vote over candidate answers.

    Candidates are clustered by match-equivalence; a failed run forms
    its own never-matching cluster.  A unique largest cluster wins
    (is_majority=True); ties are broken uniformly at random among the
    tied cluster representatives (is_majority=False).
    """
    if not candidates:
        raise EmptyInput("no candidate answers")
    clusters: list[list[Prediction]] = []
    index: dict = {}
    for cand in candidates:
        if is_failure(cand):
            clusters.append([cand])
            continue
        key = _group_key(cand, cfg)
        if key in index:
            clusters[index[key]].append(cand)
        else:
            index[key] = len(clusters)
            clusters.append([cand])
    best = max(len(c) for c in clusters)
    winners = [c[0] for c in clusters if len(c) == best]
    if len(winners) == 1:
        return winners[0], True
    return rng.choice(winners), False


def _decimal_from_segment(segment: str, position: int) -> Decimal:
    cleaned = segment.replace("_", "").strip()
    try:
        d = Decimal(cleaned)
    except InvalidOperation:
        raise ParseError(position, f"bad numeric literal: {segment!r}") from None
    if not d.is_finite():
        raise ParseError(position, f"non-finite numeric literal: {segment!r}")
    return d


def _constituent_from_node(node: ast.expr, source: str) -> Constituent:
    pos = node.col_offset
    if isinstance(node, ast.Constant):
        v = node.value
        if v is None:
            return Constituent.null()
        if isinstance(v, bool):
            return Constituent.from_number(int(v))
        if isinstance(v, (int, float)):
            segment = ast.get_source_segment(source, node) or repr(v)
            return Constituent.from_number(_decimal_from_segment(segment, pos))
        if isinstance(v, str):
            return Constituent.from_text(v)
        raise ParseError(pos, f"unsupported literal: {v!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = node.operand
        if isinstance(inner, ast.Constant) and isinstance(inner.value, (int, float)) \
                and not isinstance(inner.value, bool):
            segment = ast.get_source_segment(source, node)
            return Constituent.from_number(_decimal_from_segment(segment, pos))
        raise ParseError(pos, "sign applied to a non-numeric literal")
    if isinstance(node, ast.Name):
        if node.id in _NULL_NAMES:
            return Constituent.null()
        raise ParseError(pos, f"bare identifier: {node.id}")
    raise ParseError(pos, f"unsupported expression: {type(node).__name__}")


def canonicalize_answer(raw_text: str) -> AnswerSet:
    """Parse terminal output shaped like a list of tuples into an AnswerSet.

    Accepts bracketed lists of parenthesized tuples with string, numeric,
    and null literals.  Bare scalars in the list are promoted to
    one-element tuples.  Raises ParseError for anything else.
    """
    text = raw_text.strip()
    if not text:
        raise ParseError(0, "empty answer text")
    try:
        tree = ast.parse(text, mode="eval")
    except (SyntaxError, ValueError) as exc:
        offset = getattr(exc, "offset", 0) or 0
        msg = getattr(exc, "msg", str(exc))
        raise ParseError(offset, f"not a tuple-list literal: {msg}") from None
    top = tree.body
    if not isinstance(top, (ast.List, ast.Tuple)):
        raise ParseError(top.col_offset, "top-level value must be a list of tuples")
    tuples = []
    for element in top.elts:
        if isinstance(element, (ast.List, ast.Tuple)):
            if not element.elts:
                raise ParseError(element.col_offset, "empty tuple in answer")
            constituents = []
            for child in element.elts:
                if isinstance(child, (ast.List, ast.Tuple)):
                    raise ParseError(child.col_offset, "nested collections are not allowed")
                constituents.append(_constituent_from_node(child, text))
            tuples.append(AnswerTuple(constituents))
        else:
            tuples.append(AnswerTuple([_constituent_from_node(element, text)]))
    return AnswerSet(tuples)
