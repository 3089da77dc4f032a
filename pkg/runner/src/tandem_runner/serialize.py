"""Canonical JSON rendering of a ``compute_result`` return value.

Answers cross the process boundary as an array of arrays: numbers become
exact-decimal strings, nulls become JSON null, everything else is text.  The
client re-parses the text with its own answer model, so the rules here must
agree with that model: decimal-shaped text collapses to a number, the raw
null marker ``\\N`` reads as null, and surrounding whitespace is dropped.
"""

from __future__ import annotations

import datetime
import json
import math
from decimal import Decimal, InvalidOperation, localcontext

_NULL_TEXT = "\\N"


class UnserializableReturn(ValueError):
    """The entry function returned something with no canonical answer form."""


def _canonical_decimal_str(d: Decimal) -> str:
    """Exact decimal rendering: no exponent, no trailing zeros, no sign noise."""
    if not d.is_finite():
        raise UnserializableReturn(f"non-finite number: {d}")
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


def _text_value(value: str):
    s = value.strip()
    if s == _NULL_TEXT:
        return None
    if s:
        try:
            d = Decimal(s)
        except InvalidOperation:
            pass
        else:
            if d.is_finite():
                return _canonical_decimal_str(d)
    return s


def _is_missing(cell) -> bool:
    if cell is None:
        return True
    if isinstance(cell, float) and math.isnan(cell):
        return True
    # pandas NA / NaT / numpy nan can only appear once those packages are
    # loaded, so importing pandas here never pulls in anything new.
    module = type(cell).__module__ or ""
    if module.startswith(("pandas", "numpy")):
        import pandas as pd

        try:
            missing = pd.isna(cell)
        except (TypeError, ValueError):
            return False
        if isinstance(missing, bool):
            return missing
        if getattr(missing, "ndim", None) == 0:
            return bool(missing)
    return False


def _unwrap_scalar(cell):
    """Reduce numpy/pandas zero-dimensional scalars to plain Python values.

    Exact-type check on purpose: numpy's float64 subclasses float but needs
    ``.item()`` so its repr doesn't leak into the decimal parser.
    """
    if type(cell) in (str, bytes, bool, int, float, Decimal):
        return cell
    item = getattr(cell, "item", None)
    ndim = getattr(cell, "ndim", 0)
    if callable(item) and ndim == 0:
        try:
            return item()
        except (TypeError, ValueError):
            return cell
    return cell


def _cell_value(cell):
    if _is_missing(cell):
        return None
    cell = _unwrap_scalar(cell)
    if isinstance(cell, bool):
        return _canonical_decimal_str(Decimal(int(cell)))
    if isinstance(cell, int):
        return _canonical_decimal_str(Decimal(cell))
    if isinstance(cell, float):
        return _canonical_decimal_str(Decimal(repr(cell)))
    if isinstance(cell, Decimal):
        return _canonical_decimal_str(cell)
    if isinstance(cell, bytes):
        return _text_value(cell.hex())
    if isinstance(cell, str):
        return _text_value(cell)
    if isinstance(cell, (datetime.date, datetime.time, datetime.timedelta)):
        return _text_value(str(cell))
    raise UnserializableReturn(
        f"cannot express a {type(cell).__name__} as an answer value"
    )


def _delist(value):
    """ndarray-likes become nested lists; zero-dimensional scalars stay put."""
    tolist = getattr(value, "tolist", None)
    ndim = getattr(value, "ndim", None)
    if callable(tolist) and isinstance(ndim, int) and ndim > 0:
        return tolist()
    return value


def _rows_of(value) -> list[list]:
    if value is None:
        raise UnserializableReturn("entry returned None")
    # Tabular objects flatten to their rows.
    itertuples = getattr(value, "itertuples", None)
    if callable(itertuples):
        return [list(row) for row in itertuples(index=False, name=None)]
    if isinstance(value, (str, bytes)):
        return [[value]]
    value = _delist(value)
    if isinstance(value, (list, tuple, set, frozenset)):
        rows = []
        for element in value:
            element = _delist(element)
            if isinstance(element, (list, tuple, set, frozenset)):
                rows.append(list(element))
            else:
                rows.append([element])
        return rows
    return [[value]]


def serialize_answer(value) -> str:
    """Render a return value as canonical answer JSON.

    Accepts the documented list-of-tuples shape plus the near misses
    generated code actually produces: a bare scalar, a flat list, a
    DataFrame, or numpy containers.  Raises :class:`UnserializableReturn`
    for anything else.
    """
    rows = _rows_of(value)
    rendered = []
    for row in rows:
        if not row:
            raise UnserializableReturn("empty tuple in answer")
        rendered.append([_cell_value(cell) for cell in row])
    return json.dumps(rendered, ensure_ascii=False)
