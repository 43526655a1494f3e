"""End-to-end inference: retrieve, mask, compress, build the reader prompt, answer."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import EOD_TOKEN
from .backends.base import GenerateRequest, apply_stop
from .codec import (
    INPUT_LAYOUTS,
    PASSAGES_FIRST,
    EntityDescription,
    count_tokens,
    render_compressor_input,
)
from .masking import EntityRecognizer, MaskedQuestion, attach_descriptions, mask_question
from .prompts import ENTITY_HEADER, PASSAGE_HEADER, QUESTION_HEADER, READER_HEADERS

log = logging.getLogger(__name__)

MODES = ("kcomp", "top1", "topk", "summary_only")
ENTITY_FIRST = "entity_first"
PASSAGE_FIRST = "passage_first"


class CompressorOutputError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.01
    top_p: float = 1.0
    max_new_tokens: int = 512
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    def request(self, prompt: str) -> GenerateRequest:
        return GenerateRequest(prompt, self.temperature, self.top_p, self.max_new_tokens,
                               tuple(self.stop_sequences))


@dataclass(frozen=True)
class CompressedContext:
    entries: tuple[EntityDescription, ...]
    summary: str
    raw: str
    warnings: tuple[str, ...] = ()


def parse_compressor_output(raw: str) -> CompressedContext:
    """``surface: description<eod>`` lines, then the summary after the last ``<eod>``."""
    if not raw.strip():
        raise CompressorOutputError("compressor output is empty", raw)
    if EOD_TOKEN not in raw:
        return CompressedContext((), raw.strip(), raw, ("no entity descriptions in compressor output",))
    head, _, tail = raw.rpartition(EOD_TOKEN)
    entries = []
    for piece in head.split(EOD_TOKEN):
        line = piece.strip()
        surface, sep, description = line.partition(":")
        if not sep or not surface.strip():
            raise CompressorOutputError(f"entity line {line[:60]!r} has no 'surface:' prefix", raw)
        entries.append(EntityDescription(surface.strip(), description.strip()))
    summary = tail.strip()
    if not summary:
        raise CompressorOutputError("no summary after the last <eod>", raw)
    return CompressedContext(tuple(entries), summary, raw)


def compress(
    backend,
    masked_question,
    passages: Sequence[str],
    params: DecodeParams = DecodeParams(),
    order: str = PASSAGES_FIRST,
) -> CompressedContext:
    """One generation call; the output is parsed afterwards."""
    if EOD_TOKEN in params.stop_sequences:
        raise ValueError(f"{EOD_TOKEN} cannot be a stop sequence: descriptions continue past it")
    prompt = render_compressor_input(masked_question, passages, order)
    response = backend.generate(params.request(prompt))
    ctx = parse_compressor_output(response.text)
    for w in ctx.warnings:
        log.warning("compressor: %s", w)
    return ctx


@dataclass(frozen=True)
class ReaderPrompt:
    sections: tuple[tuple[str, str], ...]
    layout: str = ENTITY_FIRST
    zero_shot: bool = True

    def __post_init__(self):
        if not self.sections or self.sections[-1][0] != QUESTION_HEADER:
            raise ValueError("reader prompt must end with the question section")
        for header, _ in self.sections:
            if header not in READER_HEADERS:
                raise ValueError(f"unexpected reader prompt header {header!r}")

    def render(self) -> str:
        return "\n\n".join(f"{h}\n{b}" for h, b in self.sections)

    def section(self, header: str) -> Optional[str]:
        for h, b in self.sections:
            if h == header:
                return b
        return None


def render_reader_prompt(
    ctx: CompressedContext,
    question: str,
    layout: str = ENTITY_FIRST,
    summary_header: str = PASSAGE_HEADER,
    include_entities: bool = True,
) -> ReaderPrompt:
    if not ctx.summary.strip():
        raise ValueError("reader prompt needs a summary")
    if layout not in (ENTITY_FIRST, PASSAGE_FIRST):
        raise ValueError(f"unknown reader layout {layout!r}")
    summary = (summary_header, ctx.summary)
    sections = [summary]
    if include_entities and ctx.entries:
        entity = (ENTITY_HEADER, "\n".join(f"{e.surface}: {e.description}" for e in ctx.entries))
        sections = [entity, summary] if layout == ENTITY_FIRST else [summary, entity]
    return ReaderPrompt(tuple(sections) + ((QUESTION_HEADER, question),), layout)


def render_passage_prompt(passages: Sequence[str], question: str) -> ReaderPrompt:
    """Uncompressed baseline: the raw passages under one passage header."""
    block = "\n\n".join(p.strip("\n") for p in passages)
    return ReaderPrompt(((PASSAGE_HEADER, block), (QUESTION_HEADER, question)), PASSAGE_FIRST)


def answer(reader_backend, prompt, params: DecodeParams = DecodeParams()) -> str:
    text = prompt.render() if isinstance(prompt, ReaderPrompt) else prompt
    response = reader_backend.generate(params.request(text))
    return apply_stop(response.text, params.stop_sequences).strip()


# -- orchestration ----------------------------------------------------------

class WallClock:
    def __call__(self) -> float:
        return time.perf_counter()


class LogicalClock:
    """Advances a fixed tick on every read; makes stage timings reproducible."""

    def __init__(self, tick: float = 0.001):
        self.tick = tick
        self.reads = 0

    def __call__(self) -> float:
        self.reads += 1
        return self.reads * self.tick


CLOCKS = {"wall": WallClock, "logical": LogicalClock}


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "kcomp"
    k: int = 5
    input_order: str = PASSAGES_FIRST
    reader_layout: str = ENTITY_FIRST
    summary_header: str = PASSAGE_HEADER
    compressor_params: DecodeParams = DecodeParams()
    reader_params: DecodeParams = DecodeParams()
    tokenizer: str = "whitespace"
    clock: str = "wall"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.input_order not in INPUT_LAYOUTS:
            raise ValueError(f"input_order must be one of {tuple(INPUT_LAYOUTS)}")
        if self.reader_layout not in (ENTITY_FIRST, PASSAGE_FIRST):
            raise ValueError("reader_layout must be entity_first or passage_first")
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {tuple(CLOCKS)}")


@dataclass
class PipelineTrace:
    qid: str
    question: str
    mode: str
    k: int
    retrieved: list[dict] = field(default_factory=list)
    masked_question: Optional[str] = None
    mentions: list[dict] = field(default_factory=list)
    compressor_input: Optional[str] = None
    compressor_raw: Optional[str] = None
    compressed: Optional[dict] = None
    reader_prompt: Optional[str] = None
    answer: Optional[str] = None
    timings: dict = field(default_factory=dict)
    token_counts: dict = field(default_factory=dict)
    error: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineTrace":
        return cls(**data)


class _Timer:
    """Consecutive clock marks; each stage runs from the previous mark to its own,
    so stage durations telescope to the overall total."""

    def __init__(self, clock):
        self.clock = clock
        self.start = self.last = clock()

    def mark(self) -> float:
        now = self.clock()
        elapsed, self.last = now - self.last, now
        return elapsed


class _Stage:
    def __init__(self, trace: PipelineTrace, timer: _Timer, name: str):
        self.trace, self.timer, self.name = trace, timer, name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.trace.timings[self.name] = self.timer.mark()
        if exc is not None:
            self.trace.error = {"stage": self.name, "type": exc_type.__name__, "message": str(exc)}
            raw = getattr(exc, "raw", None)
            if raw is not None and self.trace.compressor_raw is None:
                self.trace.compressor_raw = raw
        return False


class Pipeline:
    def __init__(self, retriever, recognizer: EntityRecognizer, compressor, reader,
                 config: PipelineConfig = PipelineConfig()):
        self.retriever = retriever
        self.recognizer = recognizer
        self.compressor = compressor
        self.reader = reader
        self.config = config

    def run(self, question: str, qid: str = "q0", mode: Optional[str] = None) -> PipelineTrace:
        cfg = self.config
        mode = mode or cfg.mode
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        k = 1 if mode == "top1" else cfg.k
        trace = PipelineTrace(qid=qid, question=question, mode=mode, k=k)
        timer = _Timer(CLOCKS[cfg.clock]())
        try:
            self._run(trace, timer, question, mode, k)
        except Exception as exc:  # trace carries the failure; stage recorded by _Stage
            log.error("pipeline %s failed in %s: %s", qid, (trace.error or {}).get("stage"), exc)
        trace.timings["total"] = timer.last - timer.start
        self._count_tokens(trace)
        return trace

    def _run(self, trace, timer, question, mode, k):
        cfg = self.config
        with _Stage(trace, timer, "retrieve"):
            passages = self.retriever.retrieve(question, k)
            trace.retrieved = [{"chunk_id": p.chunk_id, "score": p.score, "rank": p.rank} for p in passages]
        rendered = [p.render() for p in passages]

        if mode in ("top1", "topk"):
            with _Stage(trace, timer, "render"):
                prompt = render_passage_prompt(rendered, question)
                trace.reader_prompt = prompt.render()
        else:
            with _Stage(trace, timer, "mask"):
                masked = self.mask(question)
                trace.masked_question = masked.masked
                trace.mentions = [
                    {"surface": m.surface, "span": list(m.span),
                     "entry": m.entry.surface if m.entry else None}
                    for m in masked.mentions
                ]
            with _Stage(trace, timer, "compress"):
                trace.compressor_input = render_compressor_input(masked.masked, rendered, cfg.input_order)
                ctx = compress(self.compressor, masked.masked, rendered, cfg.compressor_params, cfg.input_order)
                trace.compressor_raw = ctx.raw
                trace.compressed = {
                    "entries": [asdict(e) for e in ctx.entries],
                    "summary": ctx.summary,
                    "warnings": list(ctx.warnings),
                }
            with _Stage(trace, timer, "render"):
                prompt = render_reader_prompt(
                    ctx, question, cfg.reader_layout, cfg.summary_header,
                    include_entities=(mode == "kcomp"),
                )
                trace.reader_prompt = prompt.render()
        with _Stage(trace, timer, "answer"):
            trace.answer = answer(self.reader, prompt, cfg.reader_params)

    def mask(self, question: str) -> MaskedQuestion:
        return mask_question(question, self.recognizer.recognize(question))

    def _count_tokens(self, trace: PipelineTrace) -> None:
        name = self.config.tokenizer
        counts = {"tokenizer": name}
        for key in ("compressor_input", "reader_prompt", "answer"):
            text = getattr(trace, key)
            if text is not None:
                counts[key] = count_tokens(text, name)
        trace.token_counts = counts

    def dry_run(self, question: str, mode: Optional[str] = None) -> dict:
        """Render prompt skeletons without calling any backend."""
        cfg = self.config
        mode = mode or cfg.mode
        k = 1 if mode == "top1" else cfg.k
        placeholder = f"{{{{Top-{k} retrieved passages}}}}"
        if mode in ("top1", "topk"):
            return {"mode": mode, "reader_prompt": render_passage_prompt([placeholder], question).render()}
        if self.recognizer.policy.mode == "gazetteer":
            masked = self.mask(question)
            entries, _ = attach_descriptions(masked.mentions, self.recognizer.dictionary)
        else:
            masked = mask_question(question, [])
            entries = []
        ctx = CompressedContext(
            tuple(EntityDescription(e.surface, "{{description}}") for e in entries),
            "{{summary}}", "",
        )
        reader = render_reader_prompt(ctx, question, cfg.reader_layout, cfg.summary_header,
                                      include_entities=(mode == "kcomp"))
        return {
            "mode": mode,
            "compressor_input": render_compressor_input(masked.masked, [placeholder], cfg.input_order),
            "reader_prompt": reader.render(),
        }
