"""Embedding k-NN retrieval over corpus chunks.

Two index kinds share one interface: ``exact_flat`` scans every vector and is
the correctness reference; ``approximate_graph`` is a navigable-small-world
graph for larger corpora. Scores are cosine similarities (vectors are stored
unit-norm), ties are broken by ascending chunk id.
"""
from __future__ import annotations

import json
import math
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import hnsw
from .backends.base import EmbeddingConfigError
from .corpus import CorpusStore

log = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
INDEX_KINDS = ("exact_flat", "approximate_graph")
# per-dimension bound on the rounding error of a float64 dot product of unit vectors
_SCORE_SLACK = 4 * np.finfo(np.float64).eps


class VectorIndexError(Exception):
    """Invalid index input or an unreadable index on disk."""


@dataclass(frozen=True)
class GraphParams:
    neighbor_degree: int = 16
    construction_beam: int = 200
    # 64 gives recall@10 of about 0.64 on 128-d uniform data; 400 gives ~0.985
    query_beam: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.neighbor_degree < 2 or self.construction_beam < 1 or self.query_beam < 1:
            raise ValueError("graph parameters must be positive (neighbor_degree >= 2)")


@dataclass(frozen=True)
class RetrievalResult:
    chunk_id: str
    score: float
    rank: int


def normalize_rows(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise EmbeddingConfigError(f"expected a 2-d batch of vectors, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise EmbeddingConfigError("embedding contains non-finite values")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if (norms == 0).any():
        raise EmbeddingConfigError("embedding backend returned a zero vector")
    return arr / norms


def embed_batch(
    backend,
    texts: Sequence[str],
    prefix: str = "",
    batch_size: int = 64,
    max_inflight: int = 4,
) -> np.ndarray:
    """Embed ``texts`` in order; returns unit-norm float64 rows, one per text."""
    texts = list(texts)
    if not texts:
        raise ValueError("embed_batch needs at least one text")
    batches = [texts[i:i + batch_size] for i in range(0, len(texts), batch_size)]
    if len(batches) == 1 or max_inflight <= 1:
        results = [backend.embed(b, prefix) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            results = list(pool.map(lambda b: backend.embed(b, prefix), batches))
    rows = [row for res in results for row in res]
    if len(rows) != len(texts):
        raise EmbeddingConfigError(f"backend returned {len(rows)} vectors for {len(texts)} texts")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise EmbeddingConfigError(f"mixed embedding dimensions in one batch: {sorted(dims)}")
    return normalize_rows(rows)


class VectorIndex:
    kind: str

    def __init__(self, ids: Sequence[str], vectors):
        ids = list(ids)
        if not ids:
            raise VectorIndexError("cannot build an index from zero vectors")
        try:
            vecs = normalize_rows(vectors)
        except EmbeddingConfigError as exc:
            raise VectorIndexError(str(exc)) from None
        if len(ids) != vecs.shape[0]:
            raise VectorIndexError(f"{len(ids)} ids for {vecs.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise VectorIndexError("chunk ids must be unique")
        self.ids = ids
        # on-disk precision; scoring upcasts to float64
        self.vectors = vecs.astype("<f4")
        self._vectors64 = self.vectors.astype(np.float64)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return len(self.ids)

    def build_params(self) -> dict:
        return {}

    def _check_query(self, query, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise VectorIndexError(f"query has dim {q.shape[0]}, index has dim {self.dim}")
        return normalize_rows(q[None, :])[0]

    def _scores(self, q: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
        mat = self._vectors64 if rows is None else self._vectors64[rows]
        # row-wise reduction: identical rows always get identical scores
        return (mat * q).sum(axis=1)

    def _rank(self, q: np.ndarray, rows: np.ndarray, scores: np.ndarray, k: int) -> list[RetrievalResult]:
        # Vectorised scores can be off by a few ulps, which is enough to flip exact
        # ties. Rows that could reach the top k are rescored with correctly rounded
        # sums so the ranking (and its id tie-break) does not depend on summation order.
        n = scores.shape[0]
        if k < n:
            kth = np.partition(scores, n - k)[n - k]
            keep = np.flatnonzero(scores >= kth - _SCORE_SLACK * self.dim)
            rows, scores = rows[keep], scores[keep]
        mat = self._vectors64[rows] * q
        scores = np.array([math.fsum(row) for row in mat])
        order = np.lexsort((self._id_rank[rows], -scores))[:k]
        return [
            RetrievalResult(self.ids[int(rows[i])], float(scores[i]), r)
            for r, i in enumerate(order, start=1)
        ]

    def search(self, query, k: int) -> list[RetrievalResult]:
        raise NotImplementedError

    # -- persistence -----------------------------------------------------

    def _sections(self) -> list[tuple[str, np.ndarray]]:
        return [("vectors", self.vectors)]

    def save(self, directory: os.PathLike | str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        layout = []
        offset = 0
        with open(directory / "index.bin.tmp", "wb") as fh:
            for name, arr in self._sections():
                data = np.ascontiguousarray(arr).tobytes()
                layout.append({"name": name, "offset": offset, "dtype": arr.dtype.str,
                               "shape": list(arr.shape)})
                fh.write(data)
                offset += len(data)
            id_bytes = "\n".join(self.ids).encode("utf-8")
            layout.append({"name": "ids", "offset": offset, "length": len(id_bytes)})
            fh.write(id_bytes)
        meta = {
            "format_version": INDEX_FORMAT_VERSION,
            "kind": self.kind,
            "dim": self.dim,
            "count": self.count,
            "build_params": self.build_params(),
            "sections": layout,
        }
        meta.update(self._extra_meta())
        os.replace(directory / "index.bin.tmp", directory / "index.bin")
        (directory / "index.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def _extra_meta(self) -> dict:
        return {}


class ExactIndex(VectorIndex):
    kind = "exact_flat"

    def search(self, query, k: int) -> list[RetrievalResult]:
        q = self._check_query(query, k)
        return self._rank(q, np.arange(self.count), self._scores(q), k)


class GraphIndex(VectorIndex):
    kind = "approximate_graph"

    def __init__(self, ids, vectors, params: GraphParams = GraphParams(), _graph=None):
        super().__init__(ids, vectors)
        self.params = params
        m = params.neighbor_degree
        if _graph is None:
            levels = hnsw.draw_levels(self.count, m, params.seed)
            self._arrays = hnsw.allocate(levels, m)
            self.levels = levels
            self.entry, self.top = hnsw.build_graph(
                self.vectors, levels, m, params.construction_beam, *self._arrays
            )
        else:
            self.levels, self._arrays, self.entry, self.top = _graph

    def build_params(self) -> dict:
        return asdict(self.params)

    def search(self, query, k: int, beam: Optional[int] = None) -> list[RetrievalResult]:
        q = self._check_query(query, k)
        ef = max(beam or self.params.query_beam, k)
        visited = np.zeros(self.count, dtype=np.int64)
        rows, _ = hnsw.search_graph(q.astype(np.float32), self.vectors, self.entry, self.top,
                                    ef, *self._arrays, visited)
        want = min(k, self.count)
        if rows.shape[0] < want:
            # pruning left part of the graph unreachable; top up from a scan
            log.warning("graph search reached %d of %d requested nodes", rows.shape[0], want)
            rows = np.arange(self.count)
        return self._rank(q, rows, self._scores(q, rows), k)

    def _sections(self):
        nbr0, cnt0, nbru, cntu, slot = self._arrays
        return [
            ("vectors", self.vectors),
            ("levels", self.levels.astype("<i8")),
            ("nbr0", nbr0.astype("<i8")),
            ("cnt0", cnt0.astype("<i8")),
            ("nbru", nbru.astype("<i8")),
            ("cntu", cntu.astype("<i8")),
            ("slot", slot.astype("<i8")),
        ]

    def _extra_meta(self) -> dict:
        return {"entry": int(self.entry), "top_level": int(self.top)}


def build_index(
    chunk_ids: Sequence[str],
    vectors,
    kind: str = "exact_flat",
    params: GraphParams = GraphParams(),
) -> VectorIndex:
    if kind == "exact_flat":
        return ExactIndex(chunk_ids, vectors)
    if kind == "approximate_graph":
        return GraphIndex(chunk_ids, vectors, params)
    raise ValueError(f"unknown index kind {kind!r}; expected one of {INDEX_KINDS}")


def load_index(directory: os.PathLike | str) -> VectorIndex:
    directory = Path(directory)
    meta_path = directory / "index.meta.json"
    if not meta_path.exists():
        raise VectorIndexError(f"no index at {directory}; run `kcomp index` first")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != INDEX_FORMAT_VERSION:
        raise VectorIndexError(f"unsupported index format {meta.get('format_version')}")
    raw = (directory / "index.bin").read_bytes()
    arrays = {}
    ids: list[str] = []
    for sec in meta["sections"]:
        if sec["name"] == "ids":
            ids = raw[sec["offset"]: sec["offset"] + sec["length"]].decode("utf-8").split("\n")
            continue
        dtype = np.dtype(sec["dtype"])
        count = int(np.prod(sec["shape"]))
        arrays[sec["name"]] = np.frombuffer(raw, dtype=dtype, count=count,
                                            offset=sec["offset"]).reshape(sec["shape"]).copy()
    if len(ids) != meta["count"]:
        raise VectorIndexError("index id table does not match count")
    vectors = arrays["vectors"]
    if meta["kind"] == "exact_flat":
        index = ExactIndex.__new__(ExactIndex)
    else:
        index = GraphIndex.__new__(GraphIndex)
        index.params = GraphParams(**meta["build_params"])
        index.levels = arrays["levels"].astype(np.int64)
        index._arrays = tuple(arrays[n].astype(np.int64) for n in ("nbr0", "cnt0", "nbru", "cntu", "slot"))
        index.entry, index.top = meta["entry"], meta["top_level"]
    # bypass renormalisation so a reload is bit-identical
    index.ids = ids
    index.vectors = vectors.astype("<f4")
    index._vectors64 = index.vectors.astype(np.float64)
    index._id_rank = np.empty(len(ids), dtype=np.int64)
    index._id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return index


# -- passages ---------------------------------------------------------------

@dataclass(frozen=True)
class Passage:
    chunk_id: str
    title: str
    body: str
    score: float
    rank: int

    def render(self) -> str:
        return f"{self.title}\n{self.body}"


class Retriever:
    """Question -> top-k passages, over a sealed store and a built index."""

    def __init__(self, store: CorpusStore, index: VectorIndex, embedder, prefix: str = ""):
        self.store = store
        self.index = index
        self.embedder = embedder
        self.prefix = prefix

    def retrieve(self, question: str, k: int = 5) -> list[Passage]:
        q = embed_batch(self.embedder, [question], prefix=self.prefix)[0]
        out = []
        for r in self.index.search(q, k):
            c = self.store.chunk(r.chunk_id)
            out.append(Passage(c.chunk_id, c.title, c.body, r.score, r.rank))
        return out


def retrieve_passages(retriever: Retriever, question: str, k: int = 5) -> list[str]:
    return [p.render() for p in retriever.retrieve(question, k)]


def index_store(
    store: CorpusStore,
    embedder,
    kind: str = "exact_flat",
    params: GraphParams = GraphParams(),
    prefix: str = "",
    batch_size: int = 64,
    max_inflight: int = 4,
    directory: Optional[os.PathLike | str] = None,
) -> VectorIndex:
    """Embed every chunk of a sealed store, build the index and save it next to the store."""
    store.manifest()
    chunks = store.chunks()
    if not chunks:
        raise VectorIndexError("store has no chunks")
    vectors = embed_batch(embedder, [c.render() for c in chunks], prefix, batch_size, max_inflight)
    index = build_index([c.chunk_id for c in chunks], vectors, kind, params)
    index.save(directory or store.root / "index")
    return index
