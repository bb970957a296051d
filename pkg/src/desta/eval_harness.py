"""Evaluation metrics over response/label files.

Covers per-category and per-task accuracy aggregation, the
instruction-following rate over declarative output constraints, the
relative forgetting rate against a text-only reference, and
relative-to-baseline domain scores with win counts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .errors import DestaError, LineError

__all__ = [
    "EvalItem",
    "ConstraintSpec",
    "AccuracyReport",
    "EvalReport",
    "accuracy_report",
    "if_rate",
    "forgetting_rate",
    "relative_scores",
    "load_response_file",
    "InvalidConstraint",
    "ZeroBackbone",
    "DomainMismatch",
]


class InvalidConstraint(DestaError):
    pass


class ZeroBackbone(DestaError):
    pass


class DomainMismatch(DestaError):
    pass


@dataclass(frozen=True)
class EvalItem:
    task_id: str
    category: str
    prediction: str
    label: str


@dataclass(frozen=True)
class ConstraintSpec:
    """One declarative output constraint.

    kinds: max_words (param n), valid_json, regex_must_match (param
    pattern). A response passes only if every one of its constraints
    passes.
    """

    kind: str
    n: int | None = None
    pattern: str | None = None

    def __post_init__(self):
        if self.kind == "max_words":
            if self.n is None or self.n < 1:
                raise InvalidConstraint(f"max_words needs n >= 1, got {self.n}")
        elif self.kind == "valid_json":
            pass
        elif self.kind == "regex_must_match":
            if not self.pattern:
                raise InvalidConstraint("regex_must_match needs a pattern")
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise InvalidConstraint(f"bad pattern {self.pattern!r}: {exc}") from None
        else:
            raise InvalidConstraint(f"unknown constraint kind {self.kind!r}")

    def check(self, text: str) -> bool:
        if self.kind == "max_words":
            return len(text.split()) <= self.n
        if self.kind == "valid_json":
            try:
                json.loads(text)
                return True
            except json.JSONDecodeError:
                return False
        return re.search(self.pattern, text) is not None


_CHOICE_RE = re.compile(r"\b([A-D])\b")


def _normalize(text: str, extract_choice: bool) -> str:
    if extract_choice:
        match = _CHOICE_RE.search(text)
        if match:
            return match.group(1).casefold()
    return text.strip().casefold()


@dataclass
class AccuracyReport:
    per_category: dict[str, float]
    micro: float
    macro: float
    per_task: dict[str, float]
    normalization: str

    def to_dict(self) -> dict:
        return {
            "per_category": self.per_category,
            "micro": self.micro,
            "macro": self.macro,
            "per_task": self.per_task,
            "normalization": self.normalization,
        }


def accuracy_report(items: list[EvalItem], extract_choice: bool = False) -> AccuracyReport:
    """Exact-match accuracy (trimmed, case-folded); percentages in [0, 100].

    micro weights every item equally; macro is the unweighted mean of
    per-task accuracies. Categories with no items are simply absent.
    """
    if not items:
        raise DestaError("no evaluation items")
    by_category: dict[str, list[bool]] = {}
    by_task: dict[str, list[bool]] = {}
    correct_total = 0
    for item in items:
        ok = _normalize(item.prediction, extract_choice) == _normalize(item.label, False)
        by_category.setdefault(item.category, []).append(ok)
        by_task.setdefault(item.task_id, []).append(ok)
        correct_total += ok
    per_category = {
        cat: 100.0 * sum(oks) / len(oks) for cat, oks in sorted(by_category.items())
    }
    per_task = {task: 100.0 * sum(oks) / len(oks) for task, oks in sorted(by_task.items())}
    micro = 100.0 * correct_total / len(items)
    macro = sum(per_task.values()) / len(per_task)
    normalization = "strip+casefold exact match" + (
        " with A-D choice extraction" if extract_choice else ""
    )
    return AccuracyReport(per_category, micro, macro, per_task, normalization)


def if_rate(responses: list[tuple[str, list[ConstraintSpec]]]) -> float:
    """Percent of responses satisfying all of their constraints."""
    if not responses:
        raise DestaError("no constrained responses")
    passes = 0
    for text, constraints in responses:
        if not constraints:
            raise InvalidConstraint("every response needs at least one constraint")
        passes += all(c.check(text) for c in constraints)
    return 100.0 * passes / len(responses)


def forgetting_rate(ifrate_lalm: float, ifrate_backbone: float) -> float:
    """Relative change in instruction-following rate versus the text-only
    backbone, in percent; negative means ability was lost."""
    if ifrate_backbone <= 0:
        raise ZeroBackbone("backbone ifrate must be positive")
    return 100.0 * (ifrate_lalm - ifrate_backbone) / ifrate_backbone


def format_delta(delta: float) -> str:
    return f"{delta:+.2f}"


@dataclass(frozen=True)
class RelativeScores:
    relative: dict[str, float]
    win_count: int
    average: float

    def to_dict(self) -> dict:
        return {
            "relative": self.relative,
            "win_count": self.win_count,
            "average": self.average,
        }


def relative_scores(model: dict[str, float], baseline: dict[str, float]) -> RelativeScores:
    """Per-domain score difference against the baseline (the 0 reference);
    win_count counts strictly positive differences."""
    if set(model) != set(baseline):
        raise DomainMismatch(
            f"domain sets differ: {sorted(set(model) ^ set(baseline))}"
        )
    if not model:
        raise DomainMismatch("no domains to compare")
    relative = {d: model[d] - baseline[d] for d in sorted(model)}
    win_count = sum(1 for v in relative.values() if v > 0)
    average = sum(relative.values()) / len(relative)
    return RelativeScores(relative, win_count, average)


@dataclass
class EvalReport:
    accuracy: AccuracyReport
    ifrate: float | None = None
    delta: float | None = None
    relative: RelativeScores | None = None

    def to_dict(self) -> dict:
        out = {
            "per_category": self.accuracy.per_category,
            "micro": self.accuracy.micro,
            "macro": self.accuracy.macro,
            "per_task": self.accuracy.per_task,
            "normalization": self.accuracy.normalization,
        }
        if self.ifrate is not None:
            out["ifrate"] = self.ifrate
        if self.delta is not None:
            out["delta"] = round(self.delta, 2)
        if self.relative is not None:
            out["relative"] = self.relative.relative
            out["win_count"] = self.relative.win_count
            out["average_relative"] = self.relative.average
        return out


def _parse_constraint(obj: dict, line_no: int) -> ConstraintSpec:
    kind = obj.get("kind")
    try:
        return ConstraintSpec(
            kind=kind,
            n=obj.get("n"),
            pattern=obj.get("pattern"),
        )
    except InvalidConstraint as exc:
        raise LineError(str(exc), line_no) from None


def load_response_file(
    path: str,
) -> tuple[list[EvalItem], list[tuple[str, list[ConstraintSpec]]]]:
    """Line records with task_id/category/prediction/label and optional
    constraints. Returns (items, constrained responses)."""
    items = []
    constrained = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LineError(f"invalid JSON: {exc}", line_no) from None
            for key in ("task_id", "category", "prediction", "label"):
                if key not in obj:
                    raise LineError(f"missing field {key!r}", line_no)
            items.append(
                EvalItem(
                    str(obj["task_id"]),
                    str(obj["category"]),
                    str(obj["prediction"]),
                    str(obj["label"]),
                )
            )
            if obj.get("constraints"):
                specs = [_parse_constraint(c, line_no) for c in obj["constraints"]]
                constrained.append((str(obj["prediction"]), specs))
    if not items:
        raise DestaError(f"no response records in {path}")
    return items, constrained
