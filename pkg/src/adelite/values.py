"""Attribute value model: domains, date literals, and the journal value codec.

Values are plain Python: int, bool, str, datetime.date, or frozenset of str.
Multi-valued attributes (multiplicity "set" or a set_of domain) hold a
frozenset. UNSET is the absence marker returned by reads that resolve to
nothing; it is never stored.

Date literals use the underscore form: a first field above 31 reads
year-first (88_08_23 -> 1988-08-23), otherwise day-first (18_02_89 ->
1989-02-18). Two-digit years map into 19xx. The canonical printer emits
yy_mm_dd, widening to a full year whenever the two-digit year would
re-parse day-first.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field


class _Unset:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNSET"

    def __bool__(self):
        return False


UNSET = _Unset()

Value = object  # int | bool | str | datetime.date | frozenset[str]

DOMAIN_KINDS = ("integer", "date", "boolean", "string", "enum", "set_of")


class DomainError(ValueError):
    """A value (or a domain declaration) violates its attribute domain."""


@dataclass(frozen=True)
class Domain:
    kind: str
    values: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise DomainError(f"unknown attribute domain {self.kind!r}")
        if self.kind in ("enum", "set_of"):
            if not self.values:
                raise DomainError(f"{self.kind} domain needs a non-empty value list")
            if len(set(self.values)) != len(self.values):
                raise DomainError(f"duplicate values in {self.kind} domain: {self.values}")

    def contains(self, value) -> bool:
        if self.kind == "integer":
            return isinstance(value, int) and not isinstance(value, bool)
        if self.kind == "boolean":
            return isinstance(value, bool)
        if self.kind == "date":
            return isinstance(value, datetime.date)
        if self.kind == "string":
            return isinstance(value, str)
        if self.kind == "enum":
            return isinstance(value, str) and value in self.values
        if self.kind == "set_of":
            return isinstance(value, frozenset) and all(v in self.values for v in value)
        return False

    def widens(self, other: Domain) -> bool:
        """True if self accepts every value other accepts (refinement check)."""
        if self.kind != other.kind:
            return False
        if self.kind in ("enum", "set_of"):
            return set(other.values) <= set(self.values)
        return True

    def describe(self) -> str:
        if self.kind in ("enum", "set_of"):
            inner = ", ".join(self.values)
            return f"set_of ({inner})" if self.kind == "set_of" else f"({inner})"
        return self.kind


def parse_date_literal(text: str) -> datetime.date:
    """Parse an underscore date literal or an ISO date."""
    if "-" in text:
        return datetime.date.fromisoformat(text)
    parts = text.split("_")
    if len(parts) != 3:
        raise DomainError(f"bad date literal {text!r}")
    a, b, c = (int(p) for p in parts)
    if a > 31:
        y, m, d = a, b, c
    else:
        d, m, y = a, b, c
    if y < 100:
        y += 1900
    try:
        return datetime.date(y, m, d)
    except ValueError as err:
        raise DomainError(f"bad date literal {text!r}: {err}") from err


def format_date_literal(day: datetime.date) -> str:
    short = day.year % 100
    if short > 31:
        return f"{short:02d}_{day.month:02d}_{day.day:02d}"
    return f"{day.year:04d}_{day.month:02d}_{day.day:02d}"


def coerce_literal(text: str):
    """Best-effort literal typing used by the CLI and attribute parsers."""
    if text == "true":
        return True
    if text == "false":
        return False
    if text and (text[0].isdigit() or (text[0] == "-" and text[1:].isdigit())):
        if "_" in text or "-" in text.lstrip("-"):
            return parse_date_literal(text.lstrip())
        return int(text)
    return text


def encode_value(value) -> str:
    """Tagged string encoding used by journal lines and store serialization."""
    if isinstance(value, bool):
        return "b:true" if value else "b:false"
    if isinstance(value, int):
        return f"i:{value}"
    if isinstance(value, datetime.date):
        return f"d:{value.isoformat()}"
    if isinstance(value, frozenset):
        return "S:" + json.dumps(sorted(value))
    if isinstance(value, str):
        return "s:" + value
    raise DomainError(f"cannot encode value {value!r}")


def decode_value(text: str):
    tag, _, body = text.partition(":")
    if tag == "b":
        return body == "true"
    if tag == "i":
        return int(body)
    if tag == "d":
        return datetime.date.fromisoformat(body)
    if tag == "S":
        return frozenset(json.loads(body))
    if tag == "s":
        return body
    raise DomainError(f"cannot decode value {text!r}")


def value_repr(value) -> str:
    """Human-readable form used by CLI output and traces."""
    if value is UNSET:
        return "unset"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, datetime.date):
        return format_date_literal(value)
    if isinstance(value, frozenset):
        return "{" + ", ".join(sorted(value)) + "}"
    return str(value)
