"""Structured textual descriptions of audio clips.

One segment per line, in the form::

    [MM:SS-MM:SS] spoken content (name:value, name:value)
    [MM:SS-MM:SS] (a free-form event description)

Timestamps switch to HH:MM:SS at one hour. The trailing parenthesized
group on a line holds the attributes; a group without an unescaped ":"
is a single free-form entry, otherwise it is a comma-separated list of
name:value pairs. Reserved characters "(" ")" "," ":" and the escape
character "\\" itself are escaped with a backslash inside content and
attribute text, which makes parse and serialize exact inverses on
canonical documents.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import DestaError

__all__ = [
    "Timestamp",
    "KeyValue",
    "Bare",
    "Segment",
    "AudioDescription",
    "Violation",
    "MalformedTimestamp",
    "UnbalancedParentheses",
    "EmptyDocument",
    "InvariantViolation",
    "MissingSpan",
    "parse_description",
    "serialize_description",
    "validate_description",
    "build_description",
    "record_warnings",
]


class MalformedTimestamp(DestaError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: malformed timestamp header: {detail}")
        self.line = line


class UnbalancedParentheses(DestaError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: unbalanced parentheses")
        self.line = line


class EmptyDocument(DestaError):
    def __init__(self):
        super().__init__("line 1: empty description document")
        self.line = 1


class InvariantViolation(DestaError):
    """Raised when serializing a description that fails validation."""

    def __init__(self, violations: list["Violation"]):
        super().__init__(
            "description fails validation: "
            + "; ".join(str(v) for v in violations)
        )
        self.violations = violations


class MissingSpan(DestaError):
    def __init__(self, segment_index: int, which: str):
        super().__init__(f"segment {segment_index}: missing {which}")
        self.segment_index = segment_index


# Characters that must be backslash-escaped in serialized content and
# attribute text. The backslash is included so escaping round-trips.
_RESERVED = "\\():,"
_ESCAPE_RE = re.compile(r"([\\():,])")


def _escape(text: str) -> str:
    return _ESCAPE_RE.sub(r"\\\1", text)


def _unescape(text: str) -> str:
    # A backslash only escapes a reserved character; anything else keeps
    # the backslash literal, so parse(serialize(x)) is exact for all x.
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text) and text[i + 1] in _RESERVED:
            out.append(text[i + 1])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


@dataclass(frozen=True, order=True)
class Timestamp:
    """Whole-second offset into the audio clip."""

    seconds: int

    def render(self) -> str:
        s = self.seconds
        if s < 3600:
            return f"{s // 60:02d}:{s % 60:02d}"
        return f"{s // 3600:02d}:{(s % 3600) // 60:02d}:{s % 60:02d}"

    @classmethod
    def parse(cls, text: str) -> "Timestamp":
        parts = text.split(":")
        if len(parts) not in (2, 3) or not all(p.isdigit() and p for p in parts):
            raise ValueError(f"not a timestamp: {text!r}")
        values = [int(p) for p in parts]
        # Trailing fields are sexagesimal; the leading field is unbounded.
        for v in values[1:]:
            if v >= 60:
                raise ValueError(f"field out of range in {text!r}")
        total = 0
        for v in values:
            total = total * 60 + v
        return cls(total)


@dataclass(frozen=True)
class KeyValue:
    name: str
    value: str


@dataclass(frozen=True)
class Bare:
    text: str


AttributeEntry = KeyValue | Bare


@dataclass(frozen=True)
class Segment:
    start: Timestamp
    end: Timestamp
    content: str = ""
    attributes: tuple[AttributeEntry, ...] = ()


@dataclass(frozen=True)
class AudioDescription:
    segments: tuple[Segment, ...]


@dataclass(frozen=True)
class Violation:
    segment_index: int | None
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        where = "document" if self.segment_index is None else f"segment {self.segment_index}"
        msg = f"{where}: {self.rule}"
        return f"{msg} ({self.detail})" if self.detail else msg


_HEADER_RE = re.compile(r"^\[([0-9]+(?::[0-9]+){1,2})-([0-9]+(?::[0-9]+){1,2})\]")


def _top_level_groups(text: str, line_no: int) -> list[tuple[int, int]]:
    """Spans (open, close) of unescaped depth-1 parenthesized groups."""
    groups = []
    depth = 0
    start = -1
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == "(":
            depth += 1
            if depth == 1:
                start = i
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise UnbalancedParentheses(line_no)
            if depth == 0:
                groups.append((start, i))
        i += 1
    if depth != 0:
        raise UnbalancedParentheses(line_no)
    return groups


def _split_unescaped(text: str, sep: str) -> list[str]:
    pieces = []
    buf = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            buf.append(text[i : i + 2])
            i += 2
            continue
        if ch == sep:
            pieces.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
        i += 1
    pieces.append("".join(buf))
    return pieces


def _find_unescaped(text: str, target: str) -> int:
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            i += 2
            continue
        if ch == target:
            return i
        i += 1
    return -1


def _parse_attributes(group: str) -> tuple[AttributeEntry, ...]:
    group = group.strip()
    if not group:
        return ()
    if _find_unescaped(group, ":") < 0:
        return (Bare(_unescape(group)),)
    entries: list[AttributeEntry] = []
    for piece in _split_unescaped(group, ","):
        piece = piece.strip()
        if not piece:
            continue
        idx = _find_unescaped(piece, ":")
        if idx <= 0:
            # No name part: keep the whole piece as a free-form entry.
            entries.append(Bare(_unescape(piece)))
        else:
            name = _unescape(piece[:idx].strip())
            value = _unescape(piece[idx + 1 :].strip())
            entries.append(KeyValue(name, value))
    return tuple(entries)


def _parse_line(line: str, line_no: int) -> Segment:
    m = _HEADER_RE.match(line)
    if not m:
        raise MalformedTimestamp(line_no, line[:40] or "<blank>")
    try:
        start = Timestamp.parse(m.group(1))
        end = Timestamp.parse(m.group(2))
    except ValueError as exc:
        raise MalformedTimestamp(line_no, str(exc)) from None
    rest = line[m.end() :].strip()
    groups = _top_level_groups(rest, line_no)
    attributes: tuple[AttributeEntry, ...] = ()
    content_src = rest
    if groups and groups[-1][1] == len(rest) - 1:
        open_idx, close_idx = groups[-1]
        attributes = _parse_attributes(rest[open_idx + 1 : close_idx])
        content_src = rest[:open_idx].rstrip()
    return Segment(start, end, _unescape(content_src), attributes)


def parse_description(text: str) -> AudioDescription:
    """Parse a description document, one segment per non-blank line.

    Raises MalformedTimestamp, UnbalancedParentheses, or EmptyDocument;
    each carries the offending 1-based line number.
    """
    segments = []
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        segments.append(_parse_line(line, line_no))
    if not segments:
        raise EmptyDocument()
    return AudioDescription(tuple(segments))


def _render_entry(entry: AttributeEntry) -> str:
    if isinstance(entry, KeyValue):
        return f"{_escape(entry.name)}:{_escape(entry.value)}"
    return _escape(entry.text)


def serialize_description(d: AudioDescription) -> str:
    """Canonical text form; raises InvariantViolation on invalid input."""
    violations = validate_description(d)
    if violations:
        raise InvariantViolation(violations)
    lines = []
    for seg in d.segments:
        line = f"[{seg.start.render()}-{seg.end.render()}]"
        if seg.content:
            line += f" {_escape(seg.content)}"
        if seg.attributes:
            line += " (" + ", ".join(_render_entry(e) for e in seg.attributes) + ")"
        lines.append(line)
    return "\n".join(lines)


def _text_violations(index: int, role: str, text: str) -> list[Violation]:
    out = []
    if "\n" in text:
        out.append(Violation(index, "embedded newline", role))
    if text != text.strip():
        out.append(Violation(index, "surrounding whitespace", role))
    return out


def validate_description(d: AudioDescription) -> list[Violation]:
    """All invariant violations as data; empty list means valid."""
    violations: list[Violation] = []
    if not d.segments:
        return [Violation(None, "no segments")]
    prev_start = None
    for i, seg in enumerate(d.segments):
        if seg.start.seconds < 0 or seg.end.seconds < 0:
            violations.append(Violation(i, "negative timestamp"))
        if seg.end < seg.start:
            violations.append(Violation(i, "end before start"))
        if prev_start is not None and seg.start < prev_start:
            violations.append(Violation(i, "non-monotonic starts"))
        prev_start = seg.start
        violations.extend(_text_violations(i, "content", seg.content))
        bare_count = 0
        for entry in seg.attributes:
            if isinstance(entry, KeyValue):
                if not entry.name:
                    violations.append(Violation(i, "empty attribute name"))
                violations.extend(_text_violations(i, "attribute name", entry.name))
                violations.extend(_text_violations(i, "attribute value", entry.value))
            else:
                bare_count += 1
                if not entry.text:
                    violations.append(Violation(i, "empty attribute entry"))
                violations.extend(_text_violations(i, "attribute text", entry.text))
        if bare_count == len(seg.attributes) and bare_count > 1:
            # Commas between free-form entries are indistinguishable from
            # commas inside one entry unless a name:value pair is present.
            violations.append(Violation(i, "ambiguous attribute list"))
    return violations


def build_description(record: dict) -> AudioDescription:
    """Deterministic mapping from one interchange metadata record.

    Each record segment supplies start_s/end_s (fractional seconds are
    floored), optional content, an ordered attribute mapping, and an
    optional free-form event, in that order.
    """
    segments = []
    for i, seg in enumerate(record.get("segments") or []):
        if "start_s" not in seg:
            raise MissingSpan(i, "start_s")
        if "end_s" not in seg:
            raise MissingSpan(i, "end_s")
        start = Timestamp(math.floor(float(seg["start_s"])))
        end = Timestamp(math.floor(float(seg["end_s"])))
        entries: list[AttributeEntry] = []
        for name, value in (seg.get("attributes") or {}).items():
            entries.append(KeyValue(str(name), str(value)))
        event = seg.get("event")
        if event is not None:
            entries.append(Bare(str(event)))
        segments.append(Segment(start, end, str(seg.get("content") or ""), tuple(entries)))
    return AudioDescription(tuple(segments))


def record_warnings(record: dict) -> list[str]:
    """Non-fatal oddities in an interchange record (for validate tooling)."""
    warnings = []
    for i, seg in enumerate(record.get("segments") or []):
        for key in ("start_s", "end_s"):
            value = seg.get(key)
            if isinstance(value, float) and value != math.floor(value):
                warnings.append(f"segment {i}: {key}={value} floored to whole seconds")
    return warnings
