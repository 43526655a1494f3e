"""Training-data construction: filtering, gold-summary synthesis, record emission."""
from __future__ import annotations

import json
import logging
import os
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import RESERVED_TOKENS
from .backends.base import BackendError
from .corpus import KnowledgeEntry, split_sentences
from .masking import EntityMention, EntityRecognizer, MaskedQuestion, attach_descriptions, mask_question
from .pipeline import DecodeParams
from .prompts import render_synthesis_prompt

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
REASONS = ("kept", "no_entity", "no_description", "other")


class DatasetError(ValueError):
    pass


class SynthesisError(DatasetError):
    """Gold summary could not be produced; the example is flagged and skipped."""


@dataclass(frozen=True)
class QAExample:
    qid: str
    question: str
    gold_answer: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}, got {self.split!r}")

    @classmethod
    def from_json(cls, rec: dict) -> "QAExample":
        answer = rec.get("gold_answer", rec.get("answer", ""))
        return cls(str(rec["qid"]), rec["question"], answer or "", rec.get("split", "train"))


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str
    qid: str = ""
    split: str = ""

    def __post_init__(self):
        if self.reason not in REASONS:
            raise DatasetError(f"unknown filter reason {self.reason!r}")
        if self.keep != (self.reason == "kept"):
            raise DatasetError("keep must be true exactly when reason is 'kept'")

    def to_json(self) -> dict:
        return {"qid": self.qid, "split": self.split, "keep": self.keep, "reason": self.reason}

    @classmethod
    def from_json(cls, rec: dict) -> "FilterDecision":
        return cls(bool(rec["keep"]), rec["reason"], str(rec.get("qid", "")), rec.get("split", ""))


def filter_example(example: QAExample, mentions: Sequence, entries: Sequence) -> FilterDecision:
    """Drop questions without entities; outside the test split, also drop when nothing resolves."""
    if not mentions:
        return FilterDecision(False, "no_entity", example.qid, example.split)
    if example.split != "test" and not entries:
        return FilterDecision(False, "no_description", example.qid, example.split)
    return FilterDecision(True, "kept", example.qid, example.split)


def synthesize_gold_summary(
    backend,
    passages: Sequence[str],
    entity_surfaces: Sequence[str],
    params: DecodeParams = DecodeParams(),
    question: Optional[str] = None,
) -> str:
    """Ask the generator for an entity-focused summary of ``passages``.

    The question is never part of the prompt; when it is passed, it is only
    used to refuse prompts that would contain it verbatim.
    """
    prompt = render_synthesis_prompt(passages, entity_surfaces)
    if question and question in prompt:
        raise SynthesisError("synthesis prompt would contain the question verbatim")
    text = backend.generate(params.request(prompt)).text.strip()
    if not text:
        raise SynthesisError("generator returned an empty summary")
    for tok in RESERVED_TOKENS:
        if tok in text:
            raise SynthesisError(f"summary contains the reserved token {tok}")
    return text


@dataclass(frozen=True)
class TrainingRecord:
    qid: str
    masked_question: MaskedQuestion
    passages: tuple[str, ...]
    entries: tuple[KnowledgeEntry, ...]
    gold_summary: str
    gold_answer: str = ""
    split: str = "train"

    @property
    def question(self) -> str:
        return self.masked_question.original

    def to_json(self) -> dict:
        mq = self.masked_question
        return {
            "qid": self.qid,
            "question": mq.original,
            "masked_question": mq.masked,
            "spans": [{"surface": m.surface, "start": m.start, "end": m.end} for m in mq.mentions],
            "passages": list(self.passages),
            "entities": [
                {"surface": e.surface, "description": e.description, "source_doc_id": e.source_doc_id}
                for e in self.entries
            ],
            "gold_summary": self.gold_summary,
            "gold_answer": self.gold_answer,
            "split": self.split,
            "summary_sentences": len(split_sentences(self.gold_summary)) if self.gold_summary else 0,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False)

    @classmethod
    def from_json(cls, rec: dict) -> "TrainingRecord":
        mentions = tuple(EntityMention(s["surface"], (s["start"], s["end"])) for s in rec["spans"])
        mq = MaskedQuestion(rec["question"], rec["masked_question"], mentions)
        entries = tuple(
            KnowledgeEntry(e["surface"], e["description"], e.get("source_doc_id", ""))
            for e in rec["entities"]
        )
        return cls(rec["qid"], mq, tuple(rec["passages"]), entries, rec["gold_summary"],
                   rec.get("gold_answer", ""), rec.get("split", "train"))


def build_training_record(
    example: QAExample,
    masked: MaskedQuestion,
    passages: Sequence[str],
    entries: Sequence[KnowledgeEntry],
    gold_summary: str,
    k: int = 5,
) -> TrainingRecord:
    if len(passages) != k:
        raise DatasetError(f"{example.qid}: {len(passages)} passages, expected {k}")
    if masked.original != example.question:
        raise DatasetError(f"{example.qid}: masked question does not belong to this example")
    if example.split != "test":
        if not entries:
            raise DatasetError(f"{example.qid}: {example.split} records need at least one entity")
        if not gold_summary.strip():
            raise DatasetError(f"{example.qid}: {example.split} records need a gold summary")
    # entries travel in their own field; spans keep only surface and offsets
    masked = MaskedQuestion(masked.original, masked.masked,
                            tuple(EntityMention(m.surface, m.span) for m in masked.mentions))
    return TrainingRecord(example.qid, masked, tuple(passages), tuple(entries), gold_summary.strip(),
                          example.gold_answer, example.split)


# -- statistics ---------------------------------------------------------------

def percent_filtered(original: int, kept: int) -> float:
    """Share dropped, in percent, truncated to one decimal (13127 -> 9064 gives 30.9)."""
    if original == 0:
        return 0.0
    return ((original - kept) * 1000 // original) / 10


@dataclass
class SplitStats:
    original: int = 0
    kept: int = 0
    reasons: Counter = field(default_factory=Counter)

    @property
    def dropped(self) -> int:
        return self.original - self.kept

    @property
    def percent(self) -> float:
        return percent_filtered(self.original, self.kept)

    def to_json(self) -> dict:
        return {
            "original": self.original,
            "kept": self.kept,
            "dropped": self.dropped,
            "percent_filtered": self.percent,
            "reasons": {r: self.reasons[r] for r in REASONS if r != "kept" and self.reasons[r]},
        }


@dataclass
class FilterStats:
    splits: dict[str, SplitStats] = field(default_factory=dict)

    @classmethod
    def from_decisions(cls, decisions: Iterable[FilterDecision]) -> "FilterStats":
        stats = cls()
        for d in decisions:
            s = stats.splits.setdefault(d.split or "all", SplitStats())
            s.original += 1
            s.kept += int(d.keep)
            if not d.keep:
                s.reasons[d.reason] += 1
        return stats

    def to_json(self) -> dict:
        order = [s for s in SPLITS if s in self.splits] + sorted(set(self.splits) - set(SPLITS))
        return {name: self.splits[name].to_json() for name in order}

    def table(self) -> str:
        """Plain-text table with Original / After filtering / % Filtered rows."""
        names = list(self.to_json())
        width = max([len("After filtering")] + [len(n) for n in names]) + 2
        lines = ["".ljust(width) + "".join(n.rjust(12) for n in names)]
        lines.append("Original".ljust(width) + "".join(f"{self.splits[n].original:>12,}" for n in names))
        lines.append("After filtering".ljust(width) + "".join(f"{self.splits[n].kept:>12,}" for n in names))
        lines.append("% Filtered".ljust(width) + "".join(f"{self.splits[n].percent:>12.1f}" for n in names))
        return "\n".join(lines)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def emit_dataset(
    records: Iterable[TrainingRecord],
    decisions: Iterable[FilterDecision],
    path: os.PathLike | str,
) -> FilterStats:
    """Write records (sorted by qid), decisions.jsonl and filter_stats.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    decisions = list(decisions)
    ordered = sorted(records, key=lambda r: r.qid)
    stats = FilterStats.from_decisions(decisions)
    _atomic_write(path, "".join(r.dumps() + "\n" for r in ordered))
    _atomic_write(path.parent / "decisions.jsonl",
                  "".join(json.dumps(d.to_json()) + "\n" for d in sorted(decisions, key=lambda d: d.qid)))
    _atomic_write(path.parent / "filter_stats.json", json.dumps(stats.to_json(), indent=2) + "\n")
    return stats


def load_records(path: os.PathLike | str) -> list[TrainingRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingRecord.from_json(json.loads(l)) for l in fh if l.strip()]


def split_examples(
    examples: Sequence[QAExample], seed: int = 0, ratios=(0.8, 0.1, 0.1)
) -> list[QAExample]:
    """Reassign splits 80/10/10 (by default) with a seeded shuffle."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    order = sorted(examples, key=lambda e: e.qid)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    out = []
    for i, ex in enumerate(order):
        split = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
        out.append(QAExample(ex.qid, ex.question, ex.gold_answer, split))
    return sorted(out, key=lambda e: e.qid)


# -- orchestration ---------------------------------------------------------------

@dataclass
class BuildResult:
    records: list[TrainingRecord]
    decisions: list[FilterDecision]
    flagged: dict[str, str]


class DatasetBuilder:
    def __init__(
        self,
        recognizer: EntityRecognizer,
        retriever,
        synthesizer,
        k: int = 5,
        params: DecodeParams = DecodeParams(),
        max_workers: int = 4,
    ):
        self.recognizer = recognizer
        self.retriever = retriever
        self.synthesizer = synthesizer
        self.k = k
        self.params = params
        self.max_workers = max_workers

    def _one(self, ex: QAExample):
        mentions = self.recognizer.recognize(ex.question)
        entries, unresolved = attach_descriptions(mentions, self.recognizer.dictionary,
                                                  self.recognizer.policy.suffix_strip)
        decision = filter_example(ex, mentions, entries)
        if not decision.keep:
            return decision, None, None
        if unresolved:
            log.info("%s: kept with unresolved entities %s", ex.qid, unresolved)
        masked = mask_question(ex.question, mentions)
        passages = [p.render() for p in self.retriever.retrieve(ex.question, self.k)]
        if len(passages) < self.k:
            return decision, None, f"only {len(passages)} passages retrievable"
        summary = ""
        if ex.split != "test":
            surfaces = list(dict.fromkeys(m.surface for m in mentions))
            try:
                summary = synthesize_gold_summary(self.synthesizer, passages, surfaces,
                                                  self.params, question=ex.question)
            except (SynthesisError, BackendError) as exc:
                return decision, None, f"{type(exc).__name__}: {exc}"
        return decision, build_training_record(ex, masked, passages, entries, summary, self.k), None

    def build(self, examples: Sequence[QAExample]) -> BuildResult:
        qids = [e.qid for e in examples]
        if len(set(qids)) != len(qids):
            raise DatasetError("qids must be unique")
        if self.max_workers > 1:
            with ThreadPoolExecutor(self.max_workers) as pool:
                results = list(pool.map(self._one, examples))
        else:
            results = [self._one(e) for e in examples]
        records, decisions, flagged = [], [], {}
        for ex, (decision, record, problem) in zip(examples, results):
            decisions.append(decision)
            if problem:
                flagged[ex.qid] = problem
                log.warning("%s flagged: %s", ex.qid, problem)
            elif record is not None:
                records.append(record)
        return BuildResult(sorted(records, key=lambda r: r.qid), decisions, flagged)
