"""Prompt templates: gold-summary synthesis, reader prompts, pairwise judging."""
from __future__ import annotations

from typing import Sequence

SYNTHESIS_INSTRUCTION = "Please extract the content about the entity in fewer than four sentences."

ENTITY_HEADER = "### Entity"
PASSAGE_HEADER = "### Passage"
SUMMARY_HEADER = "### Summary"
QUESTION_HEADER = "### Questions"
READER_HEADERS = (ENTITY_HEADER, PASSAGE_HEADER, SUMMARY_HEADER, QUESTION_HEADER)

JUDGE_NO_OPINION = "Do not offer any opinions other than the choice."
JUDGE_EXPERTISE = (
    "In particular, biomedical QA requires expertise to be credible, "
    "so choose a summary where expertise exists in the domain."
)
TIE = "Tie"


def render_synthesis_prompt(passages: Sequence[str], entity_surfaces: Sequence[str]) -> str:
    """Gold-summary prompt: instruction, passages, bracketed entity list. No question."""
    if not passages:
        raise ValueError("synthesis needs at least one passage")
    if not entity_surfaces:
        raise ValueError("synthesis needs at least one entity")
    block = "\n\n".join(p.strip("\n") for p in passages)
    entities = "[" + ", ".join(entity_surfaces) + "]"
    return f"{SYNTHESIS_INSTRUCTION}\n\n{PASSAGE_HEADER}\n{block}\n\n{ENTITY_HEADER}\n{entities}"


def summary_labels(n: int) -> list[str]:
    return [f"Summary {i}" for i in range(1, n + 1)]


def _or_list(labels: Sequence[str]) -> str:
    if len(labels) == 2:
        return f"{labels[0]} or {labels[1]}"
    return ", ".join(labels[:-1]) + f", or {labels[-1]}"


def render_judge_prompt(question: str, summaries: Sequence[str]) -> str:
    """Pairwise/multiway judge prompt; ``summaries`` are already in presentation order."""
    n = len(summaries)
    if not 2 <= n <= 4:
        raise ValueError("the judge compares between 2 and 4 summaries")
    labels = summary_labels(n)
    head = (
        f"Select the summary ({_or_list(labels)}) that is more relevant and informative "
        "as a rationale for the given question.\n"
        f"{JUDGE_EXPERTISE}\n"
        f"Choice: [{', '.join(labels + [TIE])}], {JUDGE_NO_OPINION}"
    )
    body = "\n\n".join(f"### {label}\n{text}" for label, text in zip(labels, summaries))
    return f"{head}\n\n{body}\n\n### Question\n{question}"


def render_judge_reask(prompt: str, n: int) -> str:
    labels = summary_labels(n) + [TIE]
    return f"{prompt}\n\nAnswer with exactly one of: {', '.join(labels)}."
