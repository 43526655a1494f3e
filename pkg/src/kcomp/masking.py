"""Entity recognition over questions and ``<ent>`` masking.

Spans are UTF-8 byte offsets into the original question, the same unit the
external NER wire protocol uses.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from . import ENT_TOKEN
from .backends.base import ProtocolError
from .corpus import KnowledgeDictionary, KnowledgeEntry, normalize_surface

_TOKEN = re.compile(r"\w+", re.UNICODE)

DEFAULT_STOPWORDS = frozenset("""
a about above after again against all am an and any are as at be because been before being
below between both but by can could did do does doing down during each few for from further
had has have having he her here hers him his how i if in into is it its itself just me more
most my no nor not now of off on once only or other our out over own same she should so some
such than that the their them then there these they this those through to too under until up
very was we were what when where which while who whom why will with would you your yours
""".split())


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class EntityMention:
    surface: str
    span: tuple[int, int]
    entry: Optional[KnowledgeEntry] = None

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]


@dataclass(frozen=True)
class RecognizerPolicy:
    mode: str = "gazetteer"
    min_surface_chars: int = 3
    longest_match: bool = True
    case_insensitive: bool = True
    suffix_strip: bool = True
    stopwords: frozenset = DEFAULT_STOPWORDS

    def __post_init__(self):
        if self.mode not in ("gazetteer", "external_ner"):
            raise ValueError(f"unknown recognizer mode {self.mode!r}")
        if self.min_surface_chars < 1:
            raise ValueError("min_surface_chars must be >= 1")


@dataclass(frozen=True)
class MaskedQuestion:
    original: str
    masked: str
    mentions: tuple[EntityMention, ...] = ()

    def unmask(self) -> str:
        pieces = self.masked.split(ENT_TOKEN)
        if len(pieces) != len(self.mentions) + 1:
            raise MaskingError("mask count does not match mentions")
        out = [pieces[0]]
        for mention, tail in zip(self.mentions, pieces[1:]):
            out.append(mention.surface)
            out.append(tail)
        return "".join(out)


def _byte_offsets(text: str) -> list[int]:
    """offsets[i] = UTF-8 byte offset of character i (with offsets[len] = total)."""
    out = [0]
    for ch in text:
        out.append(out[-1] + len(ch.encode("utf-8")))
    return out


def _select(cands: list[tuple[int, int, object]], longest_match: bool) -> list[tuple[int, int, object]]:
    """Greedy non-overlapping selection in priority order, returned sorted by start."""
    if longest_match:
        key = lambda c: (-(c[1] - c[0]), c[0])
    else:
        key = lambda c: (c[0], c[1] - c[0])
    chosen: list[tuple[int, int, object]] = []
    for c in sorted(cands, key=key):
        if all(c[1] <= s or c[0] >= e for s, e, _ in chosen):
            chosen.append(c)
    return sorted(chosen, key=lambda c: c[0])


def _suffix_variants(token: str) -> list[str]:
    out = []
    for suffix in ("s", "es"):
        if token.endswith(suffix) and len(token) > len(suffix) + 1:
            out.append(token[: -len(suffix)])
    return out


class Gazetteer:
    """Token-sequence index over dictionary surfaces."""

    def __init__(self, dictionary: KnowledgeDictionary, policy: RecognizerPolicy = RecognizerPolicy()):
        self.policy = policy
        self.dictionary = dictionary
        table: dict[tuple[str, ...], KnowledgeEntry] = {}
        for entry in dictionary:
            key = self._key(_TOKEN.findall(entry.surface))
            if not key:
                continue
            held = table.get(key)
            # independent of dictionary insertion order
            if held is None or (entry.surface, entry.source_doc_id) < (held.surface, held.source_doc_id):
                table[key] = entry
        self.table = table
        self.max_len = max((len(k) for k in table), default=0)

    def _key(self, tokens: Sequence[str]) -> tuple[str, ...]:
        if self.policy.case_insensitive:
            return tuple(t.casefold() for t in tokens)
        return tuple(tokens)

    def match(self, tokens: Sequence[str]) -> Optional[KnowledgeEntry]:
        key = self._key(tokens)
        hit = self.table.get(key)
        if hit is None and self.policy.suffix_strip and key:
            for variant in _suffix_variants(key[-1]):
                hit = self.table.get(key[:-1] + (variant,))
                if hit is not None:
                    break
        return hit

    def candidates(self, question: str) -> list[tuple[int, int, KnowledgeEntry]]:
        """All dictionary matches as (char_start, char_end, entry), before overlap resolution."""
        toks = [(m.start(), m.end(), m.group()) for m in _TOKEN.finditer(question)]
        out = []
        for i in range(len(toks)):
            for j in range(i + 1, min(i + self.max_len, len(toks)) + 1):
                entry = self.match([t[2] for t in toks[i:j]])
                if entry is None:
                    continue
                start, end = toks[i][0], toks[j - 1][1]
                surface = question[start:end]
                if len(surface) < self.policy.min_surface_chars:
                    continue
                if normalize_surface(surface) in self.policy.stopwords:
                    continue
                out.append((start, end, entry))
        return out

    def recognize(self, question: str) -> list[EntityMention]:
        offsets = _byte_offsets(question)
        chosen = _select(self.candidates(question), self.policy.longest_match)
        return [
            EntityMention(question[s:e], (offsets[s], offsets[e]), entry)
            for s, e, entry in chosen
        ]


def lookup_with_policy(
    dictionary: KnowledgeDictionary, surface: str, suffix_strip: bool = True
) -> Optional[KnowledgeEntry]:
    entry = dictionary.lookup(surface)
    if entry is None and suffix_strip:
        words = normalize_surface(surface).split(" ")
        for variant in _suffix_variants(words[-1]):
            entry = dictionary.lookup(" ".join(words[:-1] + [variant]))
            if entry is not None:
                break
    return entry


class EntityRecognizer:
    """Question -> mentions, via the gazetteer or an external NER service."""

    def __init__(
        self,
        dictionary: KnowledgeDictionary,
        policy: RecognizerPolicy = RecognizerPolicy(),
        ner_backend=None,
    ):
        if policy.mode == "external_ner" and ner_backend is None:
            raise ValueError("external_ner mode needs an NER backend")
        self.dictionary = dictionary
        self.policy = policy
        self.ner_backend = ner_backend
        self._gazetteer = Gazetteer(dictionary, policy) if policy.mode == "gazetteer" else None

    def recognize(self, question: str) -> list[EntityMention]:
        if not question.strip():
            raise MaskingError("question is empty")
        if self._gazetteer is not None:
            return self._gazetteer.recognize(question)
        return self._from_backend(question)

    def _from_backend(self, question: str) -> list[EntityMention]:
        raw = question.encode("utf-8")
        cands = []
        for span in self.ner_backend.ner(question):
            if not 0 <= span.start < span.end <= len(raw):
                raise ProtocolError(f"/ner span {span.start}:{span.end} outside question")
            try:
                surface = raw[span.start:span.end].decode("utf-8")
            except UnicodeDecodeError:
                raise ProtocolError(f"/ner span {span.start}:{span.end} splits a character") from None
            cands.append((span.start, span.end, surface))
        out = []
        for s, e, surface in _select(cands, self.policy.longest_match):
            entry = lookup_with_policy(self.dictionary, surface, self.policy.suffix_strip)
            out.append(EntityMention(surface, (s, e), entry))
        return out


def recognize_entities(
    question: str,
    dictionary: KnowledgeDictionary,
    policy: RecognizerPolicy = RecognizerPolicy(),
    ner_backend=None,
) -> list[EntityMention]:
    return EntityRecognizer(dictionary, policy, ner_backend).recognize(question)


def mask_question(question: str, mentions: Sequence[EntityMention]) -> MaskedQuestion:
    if ENT_TOKEN in question:
        raise MaskingError(f"question already contains the reserved token {ENT_TOKEN}")
    raw = question.encode("utf-8")
    pieces = []
    cursor = 0
    for m in mentions:
        s, e = m.span
        if not 0 <= s < e <= len(raw):
            raise MaskingError(f"span {s}:{e} is outside the question")
        if s < cursor:
            raise MaskingError(f"span {s}:{e} overlaps or precedes the previous mention")
        try:
            text = raw[s:e].decode("utf-8")
            pieces.append(raw[cursor:s].decode("utf-8"))
        except UnicodeDecodeError:
            raise MaskingError(f"span {s}:{e} is not on character boundaries") from None
        if text != m.surface:
            raise MaskingError(f"span {s}:{e} holds {text!r}, mention says {m.surface!r}")
        pieces.append(ENT_TOKEN)
        cursor = e
    pieces.append(raw[cursor:].decode("utf-8"))
    return MaskedQuestion(question, "".join(pieces), tuple(mentions))


def attach_descriptions(
    mentions: Iterable[EntityMention],
    dictionary: KnowledgeDictionary,
    suffix_strip: bool = True,
) -> tuple[list[KnowledgeEntry], list[str]]:
    """Resolve mentions to entries in first-occurrence order, one per distinct entity."""
    entries: list[KnowledgeEntry] = []
    unresolved: list[str] = []
    seen_entries: set[str] = set()
    seen_unresolved: set[str] = set()
    for m in mentions:
        entry = m.entry or lookup_with_policy(dictionary, m.surface, suffix_strip)
        if entry is None:
            key = normalize_surface(m.surface)
            if key not in seen_unresolved:
                seen_unresolved.add(key)
                unresolved.append(m.surface)
            continue
        key = normalize_surface(entry.surface)
        if key not in seen_entries:
            seen_entries.add(key)
            entries.append(entry)
    return entries, unresolved
