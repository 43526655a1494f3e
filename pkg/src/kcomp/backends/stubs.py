"""Deterministic in-process stand-ins for every backend.

Stubs never touch the network and never read the clock or global RNG state,
so a given spec plus a given call sequence yields identical outputs in any
process.
"""
from __future__ import annotations

import hashlib
import math
import re
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .base import GenerateRequest, GenerateResponse, NERSpan, ProtocolError, apply_stop

_WORD = re.compile(r"\w+", re.UNICODE)


def fingerprint(prompt: str) -> str:
    return "sha256:" + hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class HashEmbedder:
    """Feature-hashing embedder over word unigrams and character trigrams.

    Texts sharing words or word fragments land on shared coordinates, so
    lexical overlap shows up as cosine similarity.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 8:
            raise ValueError("hash embedder needs dim >= 8")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self.calls = 0

    def _bucket(self, feature: str) -> tuple[int, float]:
        h = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=self._key).digest()
        n = int.from_bytes(h, "little")
        return n % self.dim, (1.0 if (n >> 63) & 1 else -1.0)

    def _features(self, text: str):
        for w in _WORD.findall(text.lower()):
            yield "w:" + w, 1.0
            padded = f"^{w}$"
            for i in range(len(padded) - 2):
                yield "c:" + padded[i:i + 3], 0.5

    def embed_one(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        for feat, weight in self._features(text):
            idx, sign = self._bucket(feat)
            v[idx] += sign * weight
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            # no word characters at all; hash the raw string instead
            idx, sign = self._bucket("raw:" + text)
            v[idx] = sign
            norm = 1.0
        return v / norm

    def embed(self, texts: Sequence[str], prefix: str = "") -> list[list[float]]:
        self.calls += 1
        return [self.embed_one(prefix + t).tolist() for t in texts]


def stub_hash_embedder(texts: Sequence[str], dim: int = 256, seed: int = 0) -> list[list[float]]:
    return HashEmbedder(dim, seed).embed(texts)


Responder = Callable[[GenerateRequest, int], str]


def _blocks(prompt: str) -> list[str]:
    return [b.strip() for b in re.split(r"\n\s*\n", prompt) if b.strip()]


def echo_last_section(request: GenerateRequest, sample_index: int = 0) -> str:
    """Return the body of the last ``### `` section (the question, for reader prompts)."""
    parts = re.split(r"^### [^\n]*\n", request.prompt, flags=re.M)
    return parts[-1].strip()


def lead_compressor(request: GenerateRequest, sample_index: int = 0) -> str:
    """A compressor that copies lead sentences.

    Passage blocks (``title`` line then body) become ``title: first sentence<eod>``
    entity lines for the first two passages; the summary is one or two lead
    sentences whose choice rotates with ``sample_index`` when sampling.
    """
    from ..corpus import extract_first_sentence

    passages = []
    for block in _blocks(request.prompt):
        if "<ent>" in block or "\n" not in block:
            continue
        title, body = block.split("\n", 1)
        passages.append((title.strip(), extract_first_sentence(" ".join(body.split()))))
    if not passages:
        return extract_first_sentence(" ".join(request.prompt.split()))
    lines = [f"{t}: {s}<eod>" for t, s in passages[:2]]
    n = len(passages)
    s = sample_index if request.temperature > 0.5 else 0
    width = 1 + (s // n) % 2
    summary = " ".join(passages[(s + j) % n][1] for j in range(min(width, n)))
    return "\n".join(lines + [summary])


def lead_summary(request: GenerateRequest, sample_index: int = 0) -> str:
    """Gold-summary stand-in: the first sentence of each of the first three passages."""
    from ..corpus import extract_first_sentence

    sentences = []
    for block in _blocks(request.prompt):
        if block.startswith("###"):
            block = block.split("\n", 1)[-1] if "\n" in block else ""
        if "\n" not in block or block.startswith("["):
            continue
        body = block.split("\n", 1)[1]
        sentences.append(extract_first_sentence(" ".join(body.split())))
    return " ".join(sentences[:3])


def _constant(text: str) -> Responder:
    return lambda request, sample_index=0: text


NAMED_RESPONDERS: dict[str, Responder] = {
    "echo_last_section": echo_last_section,
    "lead_compressor": lead_compressor,
    "lead_summary": lead_summary,
}


def resolve_responder(name: Union[str, Responder, None]) -> Optional[Responder]:
    if name is None or callable(name):
        return name
    if name.startswith("constant:"):
        return _constant(name[len("constant:"):])
    try:
        return NAMED_RESPONDERS[name]
    except KeyError:
        raise ValueError(f"unknown stub responder {name!r}") from None


class ScriptedGenerator:
    """Generator answering from a script, then from a fallback responder.

    Script keys are either the exact prompt or ``sha256:<hex>`` of it. At
    temperature above 0.5 the responder is told how many times this prompt
    has already been sampled, which is how sampled variety stays deterministic.
    """

    def __init__(
        self,
        script: Optional[Mapping[str, str]] = None,
        fallback: Union[str, Responder, None] = None,
    ):
        self.script = dict(script or {})
        self.fallback = resolve_responder(fallback)
        self.calls = 0
        self.requests: list[GenerateRequest] = []
        self._seen: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def generate(self, request: GenerateRequest) -> GenerateResponse:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            fp = fingerprint(request.prompt)
            sample_index = self._seen[fp]
            self._seen[fp] += 1
        if request.prompt in self.script:
            text = self.script[request.prompt]
        elif fp in self.script:
            text = self.script[fp]
        elif self.fallback is not None:
            text = self.fallback(request, sample_index)
        else:
            raise ProtocolError("scripted generator has no entry for this prompt")
        text = apply_stop(text, request.stop)
        return GenerateResponse(
            text=text,
            prompt_tokens=len(request.prompt.split()),
            completion_tokens=len(text.split()),
        )


class LexicalReranker:
    """Scores candidates by binary-bag-of-words cosine with the query."""

    def __init__(self):
        self.calls = 0

    @staticmethod
    def _bag(text: str) -> set[str]:
        return set(_WORD.findall(text.lower()))

    def rerank(self, query: str, candidates: Sequence[str]) -> list[float]:
        self.calls += 1
        q = self._bag(query)
        scores = []
        for c in candidates:
            b = self._bag(c)
            denom = math.sqrt(len(q) * len(b))
            scores.append(len(q & b) / denom if denom else 0.0)
        return scores


class TableOracle:
    """First-order next-token distribution: row ``t`` is P(next | last token = t)."""

    def __init__(self, table, atol: float = 1e-9):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError("transition table must be square (V x V)")
        if (table < 0).any():
            raise ValueError("transition table has negative probabilities")
        sums = table.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
        if bad.size:
            raise ValueError(f"row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
        self.table = table
        self.vocab_size = table.shape[0]

    def __call__(self, prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) == 0:
            raise ValueError("table oracle needs a non-empty prefix")
        return self.table[prefix[-1]]

    @classmethod
    def uniform(cls, vocab_size: int) -> "TableOracle":
        return cls(np.full((vocab_size, vocab_size), 1.0 / vocab_size))

    @classmethod
    def random(cls, vocab_size: int, seed: int = 0, concentration: float = 1.0) -> "TableOracle":
        rng = np.random.default_rng(seed)
        return cls(rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size))

    @classmethod
    def chain(cls, successors: Sequence[int]) -> "TableOracle":
        """Deterministic table: token ``t`` is always followed by ``successors[t]``."""
        v = len(successors)
        table = np.zeros((v, v))
        table[np.arange(v), successors] = 1.0
        return cls(table)


def table_oracle(table) -> TableOracle:
    return TableOracle(table)


class EchoNER:
    """NER stand-in that reports every case-insensitive occurrence of known surfaces.

    Offsets are UTF-8 byte offsets, as on the wire.
    """

    def __init__(self, surfaces: Sequence[str] = (), label: str = "ENTITY"):
        self.surfaces = sorted({s for s in surfaces if s}, key=lambda s: (-len(s), s))
        self.label = label
        self.calls = 0

    def ner(self, text: str) -> list[NERSpan]:
        self.calls += 1
        spans = []
        lowered = text.lower()
        for s in self.surfaces:
            for m in re.finditer(re.escape(s.lower()), lowered):
                start = len(text[: m.start()].encode("utf-8"))
                end = start + len(text[m.start(): m.end()].encode("utf-8"))
                spans.append(NERSpan(start, end, self.label))
        return sorted(spans, key=lambda s: (s.start, -s.end))


STUB_KINDS = ("hash_embedder", "scripted_generator", "lexical_reranker", "table_oracle", "echo_ner")


@dataclass
class StubSpec:
    kind: str
    seed: int = 0
    script: Optional[dict] = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STUB_KINDS:
            raise ValueError(f"unknown stub kind {self.kind!r}; expected one of {STUB_KINDS}")


def make_stub(spec: StubSpec):
    opts = spec.options
    if spec.kind == "hash_embedder":
        return HashEmbedder(dim=int(opts.get("dim", 256)), seed=spec.seed)
    if spec.kind == "scripted_generator":
        return ScriptedGenerator(spec.script, fallback=opts.get("fallback"))
    if spec.kind == "lexical_reranker":
        return LexicalReranker()
    if spec.kind == "table_oracle":
        if "table" in opts:
            return TableOracle(opts["table"])
        return TableOracle.random(int(opts.get("vocab_size", 16)), seed=spec.seed)
    return EchoNER(opts.get("surfaces", ()))
