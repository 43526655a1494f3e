"""Corpus ingestion, chunking, and the title -> first-sentence knowledge dictionary.

A store is a directory of append-only JSONL files. Sealing it writes the
knowledge dictionary and a manifest; after that the store is read-only and
safe to share between threads.
"""
from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SOURCES = ("wikipedia", "pubmed", "statpearls", "textbook", "other")
DEFAULT_ABBREVIATIONS = (
    "e.g.", "i.e.", "Dr.", "vs.", "Fig.", "Figs.", "et al.", "al.", "cf.", "approx.",
    "Mr.", "Mrs.", "Ms.", "Prof.", "St.", "No.", "Inc.", "etc.", "Eq.", "Ref.",
)


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str
    source: str = "other"


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    title: str
    body: str
    ordinal: int
    token_estimate: int

    def render(self) -> str:
        return f"{self.title}\n{self.body}"


@dataclass(frozen=True)
class ChunkPolicy:
    max_tokens: int = 512
    overlap_tokens: int = 0
    sentence_aware: bool = True

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if not 0 <= self.overlap_tokens < self.max_tokens:
            raise ValueError("need 0 <= overlap_tokens < max_tokens")


@dataclass(frozen=True)
class KnowledgeEntry:
    surface: str
    description: str
    source_doc_id: str


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    detail: str = ""


@dataclass
class CorpusStats:
    documents: int = 0
    chunks: int = 0
    rejects: list[Reject] = field(default_factory=list)

    @property
    def reject_counts(self) -> dict[str, int]:
        return dict(Counter(r.reason for r in self.rejects))

    def to_dict(self) -> dict:
        return {
            "documents": self.documents,
            "chunks": self.chunks,
            "rejects": len(self.rejects),
            "reject_reasons": self.reject_counts,
        }


# -- sentences ---------------------------------------------------------------

_TERMINATOR = re.compile(r"[.?!]")


def _is_abbreviation(text: str, i: int, abbreviations: Sequence[str]) -> bool:
    start = i
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    token = text[start:i + 1].casefold()
    for abbr in abbreviations:
        a = abbr.casefold()
        if token == a or (" " in a and text[: i + 1].casefold().endswith(a)):
            return True
    return False


def sentence_ends(text: str, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS) -> Iterator[int]:
    """Yield indices of sentence-final punctuation in ``text``.

    A terminator counts when followed by whitespace and an uppercase letter,
    or by nothing but whitespace, and the word it closes is not a listed
    abbreviation.
    """
    n = len(text)
    for m in _TERMINATOR.finditer(text):
        i = m.start()
        j = i + 1
        while j < n and text[j].isspace():
            j += 1
        if j == n:
            yield i
            continue
        if j == i + 1 or not text[j].isupper():
            continue
        if _is_abbreviation(text, i, abbreviations):
            continue
        yield i


def extract_first_sentence(text: str, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS) -> str:
    stripped = text.strip()
    if not stripped:
        raise ValueError("text is empty")
    for i in sentence_ends(stripped, abbreviations):
        return stripped[: i + 1]
    return stripped


def split_sentences(text: str, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS) -> list[str]:
    stripped = text.strip()
    out, start = [], 0
    for i in sentence_ends(stripped, abbreviations):
        out.append(stripped[start:i + 1].strip())
        start = i + 1
    tail = stripped[start:].strip()
    if tail:
        out.append(tail)
    return [s for s in out if s]


# -- chunking ----------------------------------------------------------------

def _windows(tokens: list[str], size: int, step: int) -> list[list[str]]:
    out = []
    start = 0
    while True:
        out.append(tokens[start:start + size])
        if start + size >= len(tokens):
            return out
        start += step


def chunk_text(text: str, policy: ChunkPolicy) -> list[list[str]]:
    """Split ``text`` into whitespace-token chunks, each at most ``policy.max_tokens`` long."""
    tokens = text.split()
    if not tokens:
        return []
    size, overlap = policy.max_tokens, policy.overlap_tokens
    if not policy.sentence_aware:
        return _windows(tokens, size, size - overlap)

    room = size - overlap
    units: list[list[str]] = []
    for sentence in split_sentences(text):
        toks = sentence.split()
        units.extend(toks[i:i + room] for i in range(0, len(toks), room))

    chunks: list[list[str]] = []
    current: list[str] = []
    fresh = 0  # tokens in ``current`` not carried over from the previous chunk
    for unit in units:
        if fresh and len(current) + len(unit) > size:
            chunks.append(current)
            current = current[len(current) - overlap:] if overlap else []
            fresh = 0
        current = current + unit
        fresh += len(unit)
    if fresh:
        chunks.append(current)
    return chunks


def chunk_document(doc: Document, policy: ChunkPolicy) -> list[Chunk]:
    return [
        Chunk(
            chunk_id=f"{doc.id}#{n}",
            doc_id=doc.id,
            title=doc.title,
            body=" ".join(toks),
            ordinal=n,
            token_estimate=len(toks),
        )
        for n, toks in enumerate(chunk_text(doc.text, policy))
    ]


# -- knowledge dictionary -----------------------------------------------------

def normalize_surface(surface: str) -> str:
    return " ".join(surface.casefold().split())


@dataclass
class KnowledgeDictionary:
    entries: dict[str, KnowledgeEntry] = field(default_factory=dict)
    collisions: list[tuple[str, str]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, surface: str) -> bool:
        return normalize_surface(surface) in self.entries

    def __iter__(self) -> Iterator[KnowledgeEntry]:
        return iter(self.entries.values())

    def lookup(self, surface: str) -> Optional[KnowledgeEntry]:
        return self.entries.get(normalize_surface(surface))

    def add(self, entry: KnowledgeEntry) -> bool:
        key = normalize_surface(entry.surface)
        if not key:
            raise ValueError("knowledge entry surface is empty")
        if key in self.entries:
            kept = self.entries[key]
            log.warning(
                "title collision on %r: keeping doc %s, ignoring doc %s",
                key, kept.source_doc_id, entry.source_doc_id,
            )
            self.collisions.append((kept.source_doc_id, entry.source_doc_id))
            return False
        self.entries[key] = entry
        return True

    def dumps(self) -> str:
        return "".join(
            json.dumps(
                {"key": k, "surface": e.surface, "description": e.description,
                 "source_doc_id": e.source_doc_id},
                ensure_ascii=False,
            ) + "\n"
            for k, e in self.entries.items()
        )

    @classmethod
    def loads(cls, data: str) -> "KnowledgeDictionary":
        kd = cls()
        for line in data.splitlines():
            if line.strip():
                rec = json.loads(line)
                kd.entries[rec["key"]] = KnowledgeEntry(
                    rec["surface"], rec["description"], rec["source_doc_id"]
                )
        return kd

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "KnowledgeDictionary":
        """Build directly from (surface, description) pairs; doc ids are synthetic."""
        kd = cls()
        for n, (surface, description) in enumerate(pairs):
            kd.add(KnowledgeEntry(surface, description, f"pair-{n}"))
        return kd


def build_knowledge_dictionary(
    documents: Iterable[Document], abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS
) -> KnowledgeDictionary:
    kd = KnowledgeDictionary()
    for doc in documents:
        kd.add(KnowledgeEntry(doc.title.strip(), extract_first_sentence(doc.text, abbreviations), doc.id))
    return kd


def lookup_description(kd: KnowledgeDictionary, surface: str) -> Optional[KnowledgeEntry]:
    return kd.lookup(surface)


# -- store --------------------------------------------------------------------

def parse_document(line: str) -> Document:
    """Parse one JSONL corpus record; raises ``CorpusError(reason)`` on bad input."""
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError("parse_error", str(exc)) from None
    if not isinstance(rec, dict):
        raise CorpusError("parse_error", "record is not an object")
    for key in ("id", "title", "text"):
        if key not in rec:
            raise CorpusError("parse_error", f"missing field {key!r}")
    doc_id = rec["id"]
    if isinstance(doc_id, bool) or not isinstance(doc_id, (str, int)):
        raise CorpusError("parse_error", "id must be a string")
    title, text = rec["title"], rec["text"]
    if not isinstance(title, str) or not isinstance(text, str):
        raise CorpusError("parse_error", "title/text must be strings")
    if not str(doc_id).strip() or not title.strip() or not text.strip():
        raise CorpusError("empty_field", "id, title and text must be non-empty")
    source = rec.get("source", "other") or "other"
    if source not in SOURCES:
        raise CorpusError("invalid_source", f"source {source!r} not in {SOURCES}")
    return Document(str(doc_id), title.strip(), text.strip(), source)


def _write_jsonl(fh, records: Iterable[dict]) -> None:
    for rec in records:
        fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


class CorpusStore:
    """Directory-backed corpus: documents.jsonl, chunks.jsonl, knowledge.jsonl, manifest.json."""

    def __init__(self, root: os.PathLike | str):
        self.root = Path(root)
        self._documents: Optional[list[Document]] = None
        self._chunks: Optional[list[Chunk]] = None
        self._chunk_index: Optional[dict[str, Chunk]] = None
        self._knowledge: Optional[KnowledgeDictionary] = None

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def sealed(self) -> bool:
        return self.manifest_path.exists()

    def manifest(self) -> dict:
        if not self.sealed:
            raise CorpusError("not_sealed", f"{self.root} has no manifest; run `kcomp ingest` first")
        return json.loads(self.manifest_path.read_text())

    def _policy_path(self) -> Path:
        return self.root / "chunk_policy.json"

    def ingest(self, lines: Iterable[str], policy: ChunkPolicy = ChunkPolicy()) -> CorpusStats:
        if self.sealed:
            raise CorpusError("sealed", f"{self.root} is sealed; ingest into a new store")
        self.root.mkdir(parents=True, exist_ok=True)
        if self._policy_path().exists():
            stored = ChunkPolicy(**json.loads(self._policy_path().read_text()))
            if stored != policy:
                raise CorpusError("policy_mismatch", f"store was chunked with {stored}")
        else:
            self._policy_path().write_text(json.dumps(asdict(policy)))
        seen = {d.id for d in self._read_documents()}
        stats = CorpusStats()
        with open(self.root / "documents.jsonl", "a", encoding="utf-8") as dfh, \
                open(self.root / "chunks.jsonl", "a", encoding="utf-8") as cfh:
            for n, line in enumerate(lines, start=1):
                if not line.strip():
                    continue
                try:
                    doc = parse_document(line)
                except CorpusError as exc:
                    stats.rejects.append(Reject(n, exc.args[0], exc.args[1] if len(exc.args) > 1 else ""))
                    continue
                if doc.id in seen:
                    stats.rejects.append(Reject(n, "duplicate_id", doc.id))
                    continue
                seen.add(doc.id)
                chunks = chunk_document(doc, policy)
                _write_jsonl(dfh, [asdict(doc)])
                _write_jsonl(cfh, (asdict(c) for c in chunks))
                stats.documents += 1
                stats.chunks += len(chunks)
        self._documents = self._chunks = self._chunk_index = None
        for reason, count in stats.reject_counts.items():
            log.info("rejected %d records: %s", count, reason)
        return stats

    def seal(self, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS) -> dict:
        if self.sealed:
            raise CorpusError("sealed", f"{self.root} is already sealed")
        self.root.mkdir(parents=True, exist_ok=True)
        docs = self._read_documents()
        kd = build_knowledge_dictionary(docs, abbreviations)
        (self.root / "knowledge.jsonl").write_text(kd.dumps(), encoding="utf-8")
        policy = json.loads(self._policy_path().read_text()) if self._policy_path().exists() else asdict(ChunkPolicy())
        manifest = {
            "format_version": FORMAT_VERSION,
            "documents": len(docs),
            "chunks": len(self._read_chunks()),
            "knowledge": len(kd),
            "title_collisions": len(kd.collisions),
            "chunk_policy": policy,
        }
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)
        self._knowledge = kd
        return manifest

    @classmethod
    def open(cls, root: os.PathLike | str) -> "CorpusStore":
        store = cls(root)
        manifest = store.manifest()
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CorpusError("format_version", f"unsupported store version {manifest.get('format_version')}")
        return store

    def _read_documents(self) -> list[Document]:
        # build locally and publish once, so concurrent readers never see a partial list
        if self._documents is None:
            path = self.root / "documents.jsonl"
            docs = []
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    docs = [Document(**json.loads(l)) for l in fh if l.strip()]
            self._documents = docs
        return self._documents

    def _read_chunks(self) -> list[Chunk]:
        if self._chunks is None:
            path = self.root / "chunks.jsonl"
            chunks = []
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    chunks = [Chunk(**json.loads(l)) for l in fh if l.strip()]
            self._chunks = chunks
        return self._chunks

    def documents(self) -> list[Document]:
        return list(self._read_documents())

    def chunks(self) -> list[Chunk]:
        return list(self._read_chunks())

    def chunk(self, chunk_id: str) -> Chunk:
        if self._chunk_index is None:
            self._chunk_index = {c.chunk_id: c for c in self._read_chunks()}
        try:
            return self._chunk_index[chunk_id]
        except KeyError:
            raise CorpusError("unknown_chunk", f"{chunk_id!r} is not in {self.root}") from None

    @property
    def knowledge(self) -> KnowledgeDictionary:
        if self._knowledge is None:
            path = self.root / "knowledge.jsonl"
            if not path.exists():
                raise CorpusError("not_sealed", f"{self.root} has no knowledge.jsonl; seal the store first")
            self._knowledge = KnowledgeDictionary.loads(path.read_text(encoding="utf-8"))
        return self._knowledge


def ingest_corpus(
    source: Iterable[str],
    policy: ChunkPolicy = ChunkPolicy(),
    store: Optional[CorpusStore] = None,
    root: Optional[os.PathLike | str] = None,
) -> CorpusStats:
    """Ingest a JSONL line stream into ``store`` (or a new store at ``root``)."""
    if store is None:
        if root is None:
            raise ValueError("pass a store or a root directory")
        store = CorpusStore(root)
    return store.ingest(source, policy)
