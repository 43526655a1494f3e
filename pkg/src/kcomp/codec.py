"""Compressor sequence format, loss masks, and chain-rule bookkeeping.

A training sequence is ``input_text`` followed by ``target_text``. The target
holds one ``surface: description<eod>`` line per entity (the ED segment) and
then the summary (the S segment). Only target tokens carry loss.
"""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from . import ENT_TOKEN, EOD_TOKEN, RESERVED_TOKENS

PASSAGES_FIRST = "passages_first"
QUESTION_FIRST = "question_first"
INPUT_LAYOUTS = {
    PASSAGES_FIRST: "kcomp-input/passages-first/v1",
    QUESTION_FIRST: "kcomp-input/question-first/v1",
}
SEGMENTS = ("ED", "S", "joint")


class CodecError(ValueError):
    pass


class TokenizerConfigError(CodecError):
    """The tokenizer does not keep the reserved tokens atomic."""


@dataclass(frozen=True)
class EntityDescription:
    surface: str
    description: str


@dataclass(frozen=True)
class Token:
    id: int
    start: int  # byte offsets into the tokenized text
    end: int


class Tokenizer(Protocol):
    name: str

    def tokenize(self, text: str) -> list[Token]: ...


_WS_PIECE = re.compile(r"<ent>|<eod>|(?:(?!<ent>|<eod>)\S)+")


class WhitespaceTokenizer:
    """Whitespace tokens, with ``<ent>``/``<eod>`` split out even when glued to a word.

    Ids come from ``vocab`` when given (unknown words map to 0), otherwise from
    a CRC32 hash folded into ``[3, vocab_size)``. Reserved tokens are always 1 and 2.
    """

    name = "whitespace"
    RESERVED_IDS = {ENT_TOKEN: 1, EOD_TOKEN: 2}

    def __init__(self, vocab_size: int = 32000, vocab: Optional[Mapping[str, int]] = None):
        if vocab is None and vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        self.vocab = dict(vocab) if vocab is not None else None
        self.vocab_size = vocab_size if vocab is None else max(list(vocab.values()) + [2]) + 1

    def token_id(self, piece: str) -> int:
        if piece in self.RESERVED_IDS:
            return self.RESERVED_IDS[piece]
        if self.vocab is not None:
            return self.vocab.get(piece, 0)
        return 3 + zlib.crc32(piece.encode("utf-8")) % (self.vocab_size - 3)

    def tokenize(self, text: str) -> list[Token]:
        out = []
        char_pos = byte_pos = 0
        for m in _WS_PIECE.finditer(text):
            byte_pos += len(text[char_pos:m.start()].encode("utf-8"))
            end = byte_pos + len(m.group().encode("utf-8"))
            out.append(Token(self.token_id(m.group()), byte_pos, end))
            char_pos, byte_pos = m.end(), end
        return out

    def encode(self, text: str) -> list[int]:
        return [t.id for t in self.tokenize(text)]


def count_tokens(text: str, tokenizer_name: str = "whitespace") -> int:
    if tokenizer_name != "whitespace":
        raise ValueError(f"no built-in token counter named {tokenizer_name!r}")
    return len(text.split())


def check_reserved_atomic(tokenizer) -> None:
    for tok in RESERVED_TOKENS:
        for probe in (tok, f"word{tok}word", f"a {tok} b"):
            pieces = tokenizer.tokenize(probe)
            raw = probe.encode("utf-8")
            if not any(raw[p.start:p.end] == tok.encode() for p in pieces):
                raise TokenizerConfigError(f"tokenizer {getattr(tokenizer, 'name', tokenizer)!r} splits {tok}")


# -- rendering -------------------------------------------------------------

def render_compressor_input(
    masked_question: str, passages: Sequence[str], order: str = PASSAGES_FIRST
) -> str:
    """Passages (rank order, blank-line separated) and the masked question."""
    if not passages:
        raise CodecError("compressor input needs at least one passage")
    block = "\n\n".join(p.strip("\n") for p in passages)
    question = getattr(masked_question, "masked", masked_question)
    if order == PASSAGES_FIRST:
        return f"{block}\n\n{question}"
    if order == QUESTION_FIRST:
        return f"{question}\n\n{block}"
    raise CodecError(f"unknown input layout {order!r}")


def _check_field(value: str, what: str, allow_newline: bool) -> str:
    for tok in RESERVED_TOKENS:
        if tok in value:
            raise CodecError(f"{what} contains reserved token {tok}")
    if not allow_newline and "\n" in value:
        raise CodecError(f"{what} contains a newline")
    return value.strip()


def render_target(entries: Sequence, summary: str) -> tuple[str, tuple[int, int, int, int]]:
    """Return (target_text, (ed_start, ed_end, s_start, s_end)) with byte boundaries."""
    if not entries:
        raise CodecError("target needs at least one entity")
    summary = _check_field(summary, "summary", allow_newline=True)
    if not summary:
        raise CodecError("target needs a non-empty summary")
    lines = []
    for e in entries:
        surface = _check_field(e.surface, "entity surface", allow_newline=False)
        if not surface or ":" in surface:
            raise CodecError(f"entity surface {e.surface!r} is empty or contains ':'")
        desc = _check_field(e.description, "description", allow_newline=False)
        lines.append(f"{surface}: {desc}{EOD_TOKEN}\n")
    ed = "".join(lines)
    text = ed + summary
    ed_end = len(ed.encode("utf-8"))
    return text, (0, ed_end, ed_end, len(text.encode("utf-8")))


@dataclass(frozen=True)
class SequenceTemplate:
    input_text: str
    target_text: str
    boundaries: tuple[int, int, int, int]
    layout: str = INPUT_LAYOUTS[PASSAGES_FIRST]

    def __post_init__(self):
        ed_s, ed_e, s_s, s_e = self.boundaries
        n = len(self.target_text.encode("utf-8"))
        if not (0 <= ed_s <= ed_e <= n and 0 <= s_s <= s_e <= n and ed_s <= s_s):
            raise CodecError(f"boundaries {self.boundaries} are not ordered within {n} bytes")

    @classmethod
    def build(cls, masked_question, passages, entries, summary, order: str = PASSAGES_FIRST):
        target, bounds = render_target(entries, summary)
        return cls(render_compressor_input(masked_question, passages, order), target, bounds,
                   INPUT_LAYOUTS[order])


# -- loss masks ------------------------------------------------------------

@dataclass(frozen=True)
class LossMask:
    token_ids: tuple[int, ...]
    mask: tuple[bool, ...]
    segments: tuple[str, ...]  # "input", "ED" or "S" per token

    @property
    def input_length(self) -> int:
        return self.segments.count("input")


def _tokenize_pair(template: SequenceTemplate, tokenizer):
    inp = tokenizer.tokenize(template.input_text)
    tgt = tokenizer.tokenize(template.target_text)
    if not inp:
        raise CodecError("input segment tokenizes to nothing")
    return inp, tgt


def _label(tok: Token, bounds) -> Optional[str]:
    ed_s, ed_e, s_s, s_e = bounds
    in_ed = ed_s <= tok.start and tok.end <= ed_e
    in_s = s_s <= tok.start and tok.end <= s_e
    if in_ed and not in_s:
        return "ED"
    if in_s and not in_ed:
        return "S"
    return None


def build_loss_mask(template: SequenceTemplate, tokenizer) -> LossMask:
    check_reserved_atomic(tokenizer)
    inp, tgt = _tokenize_pair(template, tokenizer)
    if not tgt:
        raise CodecError("target segment is empty; nothing to train on")
    labels = []
    for tok in tgt:
        lab = _label(tok, template.boundaries)
        if lab is None:
            raise CodecError(f"target token at bytes {tok.start}:{tok.end} is not in exactly one segment")
        labels.append(lab)
    return LossMask(
        token_ids=tuple(t.id for t in inp) + tuple(t.id for t in tgt),
        mask=(False,) * len(inp) + (True,) * len(tgt),
        segments=("input",) * len(inp) + tuple(labels),
    )


# -- likelihood bookkeeping -------------------------------------------------

TokenProbabilityOracle = Callable[[Sequence[int]], np.ndarray]


def _prob(oracle, prefix: Sequence[int], token: int) -> float:
    dist = np.asarray(oracle(prefix), dtype=np.float64)
    if dist.ndim != 1 or (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
        raise CodecError("oracle returned an invalid distribution")
    if not 0 <= token < dist.shape[0]:
        raise CodecError(f"token id {token} outside oracle vocabulary of {dist.shape[0]}")
    return float(dist[token])


def segment_nll(oracle: TokenProbabilityOracle, template: SequenceTemplate, tokenizer, segment: str) -> float:
    """Sum of -log P(token | everything before it) over one target segment.

    ``joint`` covers every target token regardless of the stored boundaries.
    Returns ``math.inf`` if any token in the segment has probability zero.
    """
    if segment not in SEGMENTS:
        raise ValueError(f"segment must be one of {SEGMENTS}")
    inp, tgt = _tokenize_pair(template, tokenizer)
    ids = [t.id for t in inp] + [t.id for t in tgt]
    ed_s, ed_e, s_s, s_e = template.boundaries
    total = 0.0
    for j, tok in enumerate(tgt):
        if segment == "ED" and not (ed_s <= tok.start and tok.end <= ed_e):
            continue
        if segment == "S" and not (s_s <= tok.start and tok.end <= s_e):
            continue
        pos = len(inp) + j
        p = _prob(oracle, ids[:pos], ids[pos])
        if p <= 0.0:
            return math.inf
        total -= math.log(p)
    return total


@dataclass(frozen=True)
class FactorizationReport:
    joint: float
    ed: float
    s_given_ed: float
    residual: float
    passed: bool
    reason: str = ""


def check_factorization(
    oracle: TokenProbabilityOracle, template: SequenceTemplate, tokenizer, tol: float = 1e-9
) -> FactorizationReport:
    """Compare the joint target NLL with the ED NLL plus the S-given-ED NLL."""
    joint = segment_nll(oracle, template, tokenizer, "joint")
    ed = segment_nll(oracle, template, tokenizer, "ED")
    s = segment_nll(oracle, template, tokenizer, "S")
    if not all(math.isfinite(x) for x in (joint, ed, s)):
        return FactorizationReport(joint, ed, s, math.inf, False, "infinite NLL: zero-probability token")
    residual = abs(joint - (ed + s))
    passed = residual <= tol
    return FactorizationReport(joint, ed, s, residual, passed,
                               "" if passed else f"residual {residual:.3g} exceeds {tol:g}")


def export_training_record(template: SequenceTemplate, tokenizer=None) -> dict:
    """JSON-ready training row; token ids and mask only when a tokenizer is given."""
    row = {
        "input_text": template.input_text,
        "target_text": template.target_text,
        "boundaries": list(template.boundaries),
        "layout": template.layout,
    }
    if tokenizer is not None:
        lm = build_loss_mask(template, tokenizer)
        row["tokenizer"] = getattr(tokenizer, "name", type(tokenizer).__name__)
        row["token_ids"] = list(lm.token_ids)
        row["loss_mask"] = [int(m) for m in lm.mask]
    return row
