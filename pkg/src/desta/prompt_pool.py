"""Instruction pool: load, seeded sampling, and request composition.

A pool file is JSONL with fields ``prompt_id``, ``domain``, ``text``.
The repo ships a small exemplar pool (descriptive, role-play, and
open-ended prompts per domain) for exercising the pipeline; production
runs supply their own pool file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DestaError, LineError

DOMAINS = ("speech", "sound", "music")


class DuplicatePromptId(DestaError):
    def __init__(self, prompt_id: str, line: int):
        super().__init__(f"line {line}: duplicate prompt_id {prompt_id!r}")
        self.prompt_id = prompt_id


class UnknownDomain(DestaError):
    def __init__(self, domain: str, line: int = 0):
        at = f"line {line}: " if line else ""
        super().__init__(f"{at}unknown domain {domain!r} (expected one of {DOMAINS})")
        self.domain = domain


class EmptyPool(DestaError):
    pass


class EmptyDomain(DestaError):
    def __init__(self, domain: str):
        super().__init__(f"no prompts for domain {domain!r}")
        self.domain = domain


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    domain: str
    text: str


@dataclass
class PromptPool:
    records: list[PromptRecord]
    by_domain: dict[str, list[PromptRecord]] = field(init=False)

    def __post_init__(self):
        self.by_domain = {}
        for rec in self.records:
            self.by_domain.setdefault(rec.domain, []).append(rec)

    def __len__(self) -> int:
        return len(self.records)


def load_pool(path: str | Path) -> PromptPool:
    """Load and validate a JSONL pool file."""
    records = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LineError(f"invalid JSON: {exc}", line_no) from None
            for key in ("prompt_id", "domain", "text"):
                if key not in obj:
                    raise LineError(f"missing field {key!r}", line_no)
            prompt_id = str(obj["prompt_id"])
            domain = str(obj["domain"])
            text = str(obj["text"])
            if domain not in DOMAINS:
                raise UnknownDomain(domain, line_no)
            if prompt_id in seen:
                raise DuplicatePromptId(prompt_id, line_no)
            if not text:
                raise LineError("empty prompt text", line_no)
            seen.add(prompt_id)
            records.append(PromptRecord(prompt_id, domain, text))
    if not records:
        raise EmptyPool(f"no prompt records in {path}")
    return PromptPool(records)


def exemplar_pool_path() -> Path:
    """Path to the exemplar pool shipped with the package."""
    return Path(resources.files("desta").joinpath("data/exemplar_pool.jsonl"))


def sample_prompt(pool: PromptPool, rng: np.random.Generator, domain: str) -> PromptRecord:
    """Uniform draw over the domain's prompts; advances rng by one draw."""
    if domain not in DOMAINS:
        raise UnknownDomain(domain)
    records = pool.by_domain.get(domain) or []
    if not records:
        raise EmptyDomain(domain)
    return records[int(rng.integers(len(records)))]


def compose_request(description: str, prompt: str) -> str:
    """Join description and prompt with a single space, nothing else."""
    if not description or not prompt:
        raise ValueError("description and prompt must be non-empty")
    return f"{description} {prompt}"
