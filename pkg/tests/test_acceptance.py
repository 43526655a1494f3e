"""Acceptance gate: eight end-to-end criteria, each reported as one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the summary lines appear at the end of
the session. ``python tests/test_acceptance.py`` runs the same checks standalone.
"""
import json
import math
import random
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fuzz import mutate_boundaries, random_template, tokenizer  # noqa: E402
from harness import FakeRetriever, PlantedReranker, SamplingCompressor  # noqa: E402
from kcomp import ENT_TOKEN  # noqa: E402
from kcomp.backends import HashEmbedder, ScriptedGenerator, TableOracle  # noqa: E402
from kcomp.cli import main  # noqa: E402
from kcomp.codec import check_factorization  # noqa: E402
from kcomp.corpus import ChunkPolicy, CorpusStore, KnowledgeDictionary  # noqa: E402
from kcomp.dataset import FilterStats, synthesize_gold_summary  # noqa: E402
from kcomp.evaluation import judge_permutation, pairwise_judge, rerank_recall, token_accounting  # noqa: E402
from kcomp.fixtures import decision_stream, synthetic_corpus_lines, table_decisions  # noqa: E402
from kcomp.masking import EntityMention, EntityRecognizer, mask_question, recognize_entities  # noqa: E402
from kcomp.pipeline import CompressedContext, Pipeline, PipelineConfig, render_reader_prompt  # noqa: E402
from kcomp.prompts import JUDGE_NO_OPINION, QUESTION_HEADER, SYNTHESIS_INSTRUCTION  # noqa: E402
from kcomp.retrieval import GraphParams, Retriever, build_index, index_store  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record the outcome of one criterion, then let any failure propagate."""
    details: list[str] = []
    start = time.perf_counter()
    try:
        yield details
    except BaseException as exc:
        RESULTS[number] = (False, f"{title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    elapsed = time.perf_counter() - start
    RESULTS[number] = (True, f"{title}: {'; '.join(details + [f'{elapsed:.1f}s'])}")


def summary_lines() -> list[str]:
    return [f"criterion {n}: {'PASS' if ok else 'FAIL'}  {msg}" for n, (ok, msg) in sorted(RESULTS.items())]


# 1 ---------------------------------------------------------------------------------

def test_1_chain_rule_factorization():
    with criterion(1, "chain rule") as notes:
        start = time.perf_counter()
        rng = random.Random(20241)
        tok = tokenizer()
        worst = 0.0
        for case in range(1000):
            oracle = TableOracle.random(64, seed=case, concentration=rng.choice([0.1, 0.5, 1.0, 5.0]))
            report = check_factorization(oracle, random_template(rng), tok, tol=1e-9)
            assert report.passed, f"case {case}: {report.reason}"
            worst = max(worst, report.residual)
        detected = 0
        for case in range(200):
            oracle = TableOracle.random(64, seed=10_000 + case)
            mutated = mutate_boundaries(random_template(rng), tok, rng)
            detected += not check_factorization(oracle, mutated, tok, tol=1e-9).passed
        elapsed = time.perf_counter() - start
        notes += [f"max residual {worst:.2e}", f"mutations detected {detected}/200"]
        assert detected >= 198
        assert elapsed < 10, f"took {elapsed:.1f}s"


# 2 ---------------------------------------------------------------------------------

def test_2_masking_round_trip():
    with criterion(2, "masking round trip") as notes:
        kd = KnowledgeDictionary.from_pairs([("symptom", "A sign."), ("Down syndrome", "A disorder.")])
        example = mask_question("What are the symptoms of Down syndrome?",
                                recognize_entities("What are the symptoms of Down syndrome?", kd))
        assert example.masked == "What are the <ent> of <ent>?"
        rng = random.Random(2)
        alphabet = "abcdefghij klmnopé中ß?!,.-0123456789 "
        terms = ["Down syndrome", "insulin", "clinical trial", "rheumatoid arthritis", "Sjögren syndrome"]
        recognizer = EntityRecognizer(KnowledgeDictionary.from_pairs((t, f"about {t}") for t in terms))
        for _ in range(1000):
            parts = []
            for _ in range(rng.randint(0, 5)):
                parts.append("".join(rng.choices(alphabet, k=rng.randint(0, 12))))
                parts.append(" " + rng.choice(terms) + rng.choice(["", "s"]) + " ")
            parts.append("".join(rng.choices(alphabet, k=rng.randint(1, 12))))
            question = "".join(parts)
            if not question.strip():
                continue
            mentions = recognizer.recognize(question)
            masked = mask_question(question, mentions)
            assert masked.unmask() == question
            assert masked.masked.count(ENT_TOKEN) == len(mentions)
            # planted spans at arbitrary byte offsets round-trip as well
            raw = question.encode()
            cuts = sorted({0, len(question)} | {rng.randint(0, len(question)) for _ in range(4)})
            planted = []
            for a, b in zip(cuts[::2], cuts[1::2]):
                if a < b:
                    s, e = len(question[:a].encode()), len(question[:b].encode())
                    planted.append(EntityMention(raw[s:e].decode(), (s, e)))
            again = mask_question(question, planted)
            assert again.unmask() == question and again.masked.count(ENT_TOKEN) == len(planted)
        notes.append("1000 fuzzed questions")


# 3 ---------------------------------------------------------------------------------

def _fsum_ranking(vectors64, q, ids, k):
    prods = (vectors64 * q).tolist()
    scores = [math.fsum(row) for row in prods]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:k]]


def test_3_knn_correctness():
    with criterion(3, "kNN correctness") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(3)
        base = rng.normal(size=(9000, 128))
        dupes = base[rng.integers(0, 9000, size=1000)]          # exact ties
        vectors = np.vstack([base, dupes])
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        ids = [f"chunk-{(i * 7919) % 10000:05d}" for i in range(10000)]
        exact = build_index(ids, vectors)
        stored = exact.vectors.astype(np.float64)
        queries = [rng.normal(size=128) for _ in range(15)] + [vectors[i] for i in rng.integers(9000, 10000, 5)]
        from kcomp.retrieval import normalize_rows
        for q in queries:
            qn = normalize_rows([q])[0]
            truth = _fsum_ranking(stored, qn, ids, 32)
            for k in (1, 5, 10, 32):
                assert [r.chunk_id for r in exact.search(q, k)] == truth[:k]
        graph = build_index(ids, vectors, "approximate_graph", GraphParams(seed=0))
        hits = 0
        for _ in range(200):
            q = rng.normal(size=128)
            truth = {r.chunk_id for r in exact.search(q, 10)}
            hits += len(truth & {r.chunk_id for r in graph.search(q, 10)})
        recall = hits / 2000
        elapsed = time.perf_counter() - start
        notes += [f"graph recall@10 {recall:.3f}"]
        assert recall >= 0.95
        assert elapsed < 60, f"took {elapsed:.1f}s"


# 4 ---------------------------------------------------------------------------------

def test_4_filter_statistics():
    with criterion(4, "filter statistics") as notes:
        cells = {("MedQuAD", "train"): (13127, 9064, 30.9), ("MedQuAD", "test"): (1640, 1554, 5.2),
                 ("BioASQ", "test"): (707, 647, 8.4)}
        for (dataset, split), expected in cells.items():
            s = FilterStats.from_decisions(table_decisions(dataset, seed=4)).splits[split]
            assert (s.original, s.kept, s.percent) == expected
        rng = random.Random(4)
        for i in range(300):
            split = rng.choice(["train", "validation", "test"])
            original = rng.randint(1, 5000)
            kept = rng.randint(0, original)
            s = FilterStats.from_decisions(decision_stream(split, original, kept, seed=i)).splits[split]
            assert s.kept + s.dropped == s.original == original
            assert sum(s.reasons.values()) == s.dropped
        notes.append("3 published cells, 300 fuzzed streams")


# 5 ---------------------------------------------------------------------------------

def test_5_recall_protocol():
    with criterion(5, "Recall@K protocol") as notes:
        questions = [(f"q{i:03d}", f"planted question {i}") for i in range(100)]
        favour = {q for _, q in random.Random(5).sample(questions, 77)}
        ks = tuple(range(1, 21))
        report = rerank_recall(questions, SamplingCompressor(), FakeRetriever(), PlantedReranker(favour), ks=ks)
        assert report.evaluated == 100
        assert report.generated[1] == 0.77
        values = [report.generated[k] for k in ks]
        assert values == sorted(values)
        assert report.generated[20] == 1.0
        notes.append(f"Recall@1 {report.generated[1]:.2f}, Recall@20 {report.generated[20]:.2f}")


# 6 ---------------------------------------------------------------------------------

def test_6_token_accounting(tmp_path):
    with criterion(6, "token accounting") as notes:
        T = 120
        store = CorpusStore(tmp_path / "store")
        store.ingest(synthetic_corpus_lines(60, T, seed=6), ChunkPolicy(max_tokens=T, sentence_aware=False))
        store.seal()
        embedder = HashEmbedder(64)
        retriever = Retriever(store, index_store(store, embedder), embedder)
        recognizer = EntityRecognizer(store.knowledge)
        questions = [f"What does topic{i:04d} say about kinase signal?" for i in range(20)]
        for mode in ("top1", "topk", "kcomp"):
            pipe = Pipeline(retriever, recognizer, ScriptedGenerator(fallback="lead_compressor"),
                            ScriptedGenerator(fallback="echo_last_section"),
                            PipelineConfig(mode=mode, clock="wall"))
            tdir = tmp_path / mode / "traces"
            tdir.mkdir(parents=True)
            for i, q in enumerate(questions):
                (tdir / f"q{i:02d}.json").write_text(pipe.run(q, f"q{i:02d}").dumps())
        report = token_accounting([tmp_path / m for m in ("top1", "topk", "kcomp")])
        m = report.modes
        top1, topk, kcomp = (m[x].mean_prompt_tokens for x in ("top1", "topk", "kcomp"))
        predicted = top1 + 4 * T
        assert abs(topk - predicted) <= 0.02 * predicted, (top1, topk, predicted)
        assert kcomp < topk
        for s in m.values():
            assert abs(s.total_s - (s.compression_s + s.inference_s)) <= 1e-6
        notes.append(f"top1 {top1:.1f}, topk {topk:.1f} (predicted {predicted:.1f}), kcomp {kcomp:.1f}")


# 7 ---------------------------------------------------------------------------------

def test_7_prompt_fidelity():
    with criterion(7, "prompt fidelity") as notes:
        rng = random.Random(7)
        words = "cell gene dose assay kinase plasma marker insulin trial".split()
        for _ in range(200):
            question = "Why " + " ".join(rng.choices(words, k=rng.randint(2, 6))) + " happens?"
            passages = [f"T{i}\n" + " ".join(rng.choices(words, k=20)) + "." for i in range(5)]
            gen = ScriptedGenerator(fallback="lead_summary")
            synthesize_gold_summary(gen, passages, rng.sample(words, 3), question=question)
            prompt = gen.requests[0].prompt
            assert SYNTHESIS_INSTRUCTION in prompt.splitlines()
            assert question not in prompt
        judge = ScriptedGenerator(fallback="constant:Tie")
        pairwise_judge(judge, "Q?", {"a": "x", "b": "y", "c": "z"}, seed=1)
        assert JUDGE_NO_OPINION in judge.requests[0].prompt
        ctx = CompressedContext((), "Summary text.", "")
        reader = render_reader_prompt(ctx, "Is it safe?")
        assert reader.zero_shot and reader.sections[-1] == (QUESTION_HEADER, "Is it safe?")
        assert reader.render().endswith("### Questions\nIs it safe?")
        notes.append("200 fuzzed synthesis prompts")


# 8 ---------------------------------------------------------------------------------

def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _full_run(ws: Path) -> dict[str, bytes]:
    cfg = ["--config", str(ws / "demo.ini")]
    run = ws / "run"
    steps = [
        ["run"],
        ["run", "--mode", "topk", "--out", str(run / "topk")],
        ["eval-speed", "--runs", str(run), str(run / "topk")],
        ["eval-judge", "--runs", str(run), str(run / "topk")],
        ["eval-rerank"],
        ["build-dataset"],
    ]
    for step in steps:
        assert main(step + cfg) == 0, step
    return _snapshot(run)


def test_8_determinism(demo_workspace, capsys):
    with criterion(8, "determinism") as notes:
        ws = demo_workspace
        assert main(["ingest", "--out", str(ws / "prep"), "--config", str(ws / "demo.ini")]) == 0
        assert main(["index", "--out", str(ws / "prep"), "--config", str(ws / "demo.ini")]) == 0
        first = _full_run(ws)
        shutil.rmtree(ws / "run")
        second = _full_run(ws)
        assert sorted(first) == sorted(second)
        differing = [name for name in first if first[name] != second[name]]
        assert not differing, differing
        assert any(n.startswith("traces/") for n in first) and "speed_report.json" in first
        for n in (2, 3, 4):
            systems = [f"s{i}" for i in range(n)]
            for seed in range(1000):
                perm = judge_permutation(n, seed)
                presented = [systems[i] for i in perm]
                inverse = {presented[pos]: pos for pos in range(n)}
                assert [presented[inverse[s]] for s in systems] == systems
                assert sorted(perm) == list(range(n))
        notes.append(f"{len(first)} files byte-identical; 3000 permutations inverted")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q"])
    sys.exit(code)
