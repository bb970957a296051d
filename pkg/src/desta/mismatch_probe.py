"""Corpus perplexity of training targets under a scoring backend.

Token-weighted over the whole corpus: ppl = exp(sum of per-token nll /
token count), never a mean of per-sample perplexities. Targets are
scored conditioned on description + prompt (the composition used at
construction time), with no system prompt; every report labels that
convention. Perplexities are only comparable within one scorer because
tokenization is backend-owned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import DestaError
from .forge_pipeline import Triplet
from .llm_backend import GenerationBackend
from .prompt_pool import compose_request

__all__ = ["PplReport", "ComparisonTable", "corpus_perplexity", "compare_sources"]

CONTEXT_CONVENTION = "target conditioned on description + prompt, no system prompt"


@dataclass(frozen=True)
class PplReport:
    dataset_label: str
    scorer_model: str
    token_count: int
    total_nll: float
    ppl: float

    def to_dict(self) -> dict:
        return {
            "dataset_label": self.dataset_label,
            "scorer_model": self.scorer_model,
            "token_count": self.token_count,
            "total_nll": self.total_nll,
            "ppl": self.ppl,
        }


@dataclass(frozen=True)
class ComparisonTable:
    reports: tuple[PplReport, ...]
    argmin_label: str

    def to_dict(self) -> dict:
        return {
            "context_convention": CONTEXT_CONVENTION,
            "reports": [r.to_dict() for r in self.reports],
            "argmin_label": self.argmin_label,
        }

    def render(self) -> str:
        width = max(len(r.dataset_label) for r in self.reports)
        lines = [f"{'dataset':<{width}}  {'tokens':>8}  {'ppl':>10}"]
        for r in self.reports:
            marker = " *" if r.dataset_label == self.argmin_label else ""
            lines.append(f"{r.dataset_label:<{width}}  {r.token_count:>8}  {r.ppl:>10.4f}{marker}")
        return "\n".join(lines)


def corpus_perplexity(
    scorer: GenerationBackend,
    triplets: list[Triplet],
    label: str = "dataset",
) -> PplReport:
    """Token-weighted corpus perplexity of the triplets' targets."""
    if not triplets:
        raise DestaError("cannot compute perplexity of an empty dataset")
    nlls = []
    token_count = 0
    for triplet in triplets:
        context = compose_request(triplet.description, triplet.prompt)
        scores = scorer.score_tokens(context, triplet.target)
        nlls.append(scores.total_nll)
        token_count += len(scores.tokens)
    total_nll = math.fsum(nlls)
    ppl = math.exp(total_nll / token_count)
    return PplReport(label, scorer.model_name, token_count, total_nll, ppl)


def compare_sources(
    scorer: GenerationBackend,
    labeled_datasets: list[tuple[str, list[Triplet]]],
) -> ComparisonTable:
    """Perplexity per dataset under one scorer; argmin breaks ties first-wins."""
    if len(labeled_datasets) < 2:
        raise DestaError("compare_sources needs at least two datasets")
    reports = tuple(
        corpus_perplexity(scorer, triplets, label=label)
        for label, triplets in labeled_datasets
    )
    argmin = min(reports, key=lambda r: r.ppl).dataset_label
    return ComparisonTable(reports, argmin)


def write_report(table: ComparisonTable, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
