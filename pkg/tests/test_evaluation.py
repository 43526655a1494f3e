import json
import math
from collections import Counter

import pytest

from harness import FakeRetriever, PlantedReranker, SamplingCompressor
from kcomp.backends import LexicalReranker, ScriptedGenerator
from kcomp.evaluation import (
    GENERATED,
    RETRIEVED,
    AccountingError,
    EvaluationError,
    JudgeVerdict,
    RerankCandidate,
    attribute_origins,
    dataset_stats,
    judge_permutation,
    load_decisions,
    pairwise_judge,
    parse_judge_label,
    rank_candidates,
    rerank_recall,
    score_question,
    token_accounting,
    write_judge_verdicts,
    write_recall_report,
)
from kcomp.fixtures import table_decisions
from kcomp.prompts import JUDGE_NO_OPINION, TIE


def _questions(n):
    return [(f"q{i:03d}", f"question number {i}") for i in range(n)]


# -- reranking preference ---------------------------------------------------------

def test_planted_winners_give_exact_recall():
    qs = _questions(10)
    favour = {q for _, q in qs[:7]}
    report = rerank_recall(qs, SamplingCompressor(), FakeRetriever(), PlantedReranker(favour), ks=(1, 5, 10, 20))
    assert report.evaluated == 10 and report.flagged == {}
    assert report.generated[1] == 0.7
    assert report.retrieved[1] == pytest.approx(0.3)
    assert report.generated[20] == 1.0


def test_uniformly_preferred_generations():
    qs = _questions(5)
    report = rerank_recall(qs, SamplingCompressor(), FakeRetriever(),
                           PlantedReranker({q for _, q in qs}, generated_floor=50.0), ks=(1,))
    assert report.generated[1] == 1.0 and report.retrieved[1] == 0.0


def test_recall_is_monotone_and_sums_to_one_at_k1():
    qs = _questions(30)
    favour = {q for _, q in qs[::3]}
    ks = tuple(range(1, 21))
    report = rerank_recall(qs, SamplingCompressor(), FakeRetriever(), PlantedReranker(favour), ks=ks)
    for origin in (report.generated, report.retrieved):
        values = [origin[k] for k in ks]
        assert values == sorted(values)
    assert report.generated[1] + report.retrieved[1] == pytest.approx(1.0)
    assert report.generated[20] == report.retrieved[20] == 1.0


def test_lexical_reranker_end_to_end_is_consistent():
    qs = _questions(8)
    report = rerank_recall(qs, SamplingCompressor(), FakeRetriever(), LexicalReranker(), max_workers=4)
    assert report.generated[1] + report.retrieved[1] == pytest.approx(1.0)
    again = rerank_recall(qs, SamplingCompressor(), FakeRetriever(), LexicalReranker(), max_workers=1)
    assert again.to_json() == report.to_json()


def test_too_few_distinct_generations_are_flagged():
    qs = _questions(3)
    comp = SamplingCompressor(distinct=4)
    report = rerank_recall(qs, comp, FakeRetriever(), PlantedReranker(set()), max_attempts=12)
    assert report.evaluated == 0 and len(report.flagged) == 3
    assert "4 distinct generations after 12 attempts" in report.flagged["q000"]
    assert comp.calls == 36
    short = rerank_recall(qs, SamplingCompressor(), FakeRetriever(available=6), PlantedReranker(set()))
    assert "passages retrievable" in short.flagged["q001"]


def test_k_values_are_validated():
    with pytest.raises(ValueError):
        rerank_recall([], SamplingCompressor(), FakeRetriever(), PlantedReranker(set()), ks=(21,))
    with pytest.raises(ValueError):
        rerank_recall([], SamplingCompressor(), FakeRetriever(), PlantedReranker(set()), ks=(0,))


def test_ties_are_ordered_by_candidate_id():
    cands = [RerankCandidate("c03", GENERATED, "a", 1.0), RerankCandidate("c01", RETRIEVED, "b", 1.0),
             RerankCandidate("c02", RETRIEVED, "c", 2.0)]
    ordered, ties = rank_candidates(cands)
    assert [c.cid for c in ordered] == ["c02", "c01", "c03"] and ties == 1


def test_duplicates_take_the_origin_of_the_better_copy():
    ordered = [RerankCandidate("c05", RETRIEVED, "same", 3.0), RerankCandidate("c01", GENERATED, "same", 3.0),
               RerankCandidate("c02", GENERATED, "other", 1.0)]
    origins, dups = attribute_origins(ordered)
    assert origins == [RETRIEVED, RETRIEVED, GENERATED] and dups == [["c05", "c01"]]


def test_score_question_rejects_bad_reranker_output():
    class Short:
        def rerank(self, q, cands):
            return [1.0]

    class NaN:
        def rerank(self, q, cands):
            return [float("nan")] * len(cands)

    for bad in (Short(), NaN()):
        with pytest.raises(EvaluationError):
            score_question("q", "q", ["g"], ["r"], bad, (1,))


def test_candidate_ids_are_shuffled_by_seed():
    gen, ret = [f"g{i}" for i in range(10)], [f"r{i}" for i in range(10)]
    a = score_question("q", "q", gen, ret, LexicalReranker(), (1,), seed=0)
    b = score_question("q", "q", gen, ret, LexicalReranker(), (1,), seed=0)
    c = score_question("q", "q", gen, ret, LexicalReranker(), (1,), seed=1)
    assert a.candidates == b.candidates and a.candidates != c.candidates
    assert sorted(x["cid"] for x in a.candidates) == [f"c{i:02d}" for i in range(20)]


def test_recall_report_file(tmp_path):
    report = rerank_recall(_questions(2), SamplingCompressor(), FakeRetriever(), PlantedReranker(set()))
    data = json.loads(write_recall_report(tmp_path, report).read_text())
    assert data["recall"][RETRIEVED]["1"] == 1.0
    assert "candidate id" in data["tie_policy"]


# -- judge ---------------------------------------------------------------------------

SUMMARIES = {"kcomp": "alpha", "recomp": "beta", "topk": "gamma"}


def test_first_label_maps_back_to_the_system_shown_first():
    for seed in range(20):
        v = pairwise_judge(ScriptedGenerator(fallback="constant:Summary 1"), "Q?", SUMMARIES, seed=seed)
        assert v.choice == v.presented[0]
        assert v.presented == tuple(v.systems[i] for i in v.permutation)
        assert v.status == "ok"


def test_prompt_shows_summaries_in_presented_order():
    gen = ScriptedGenerator(fallback="constant:Tie")
    v = pairwise_judge(gen, "Q?", SUMMARIES, seed=5)
    prompt = gen.requests[0].prompt
    assert JUDGE_NO_OPINION in prompt and prompt.endswith("### Question\nQ?")
    positions = [prompt.index(f"\n{SUMMARIES[s]}\n") for s in v.presented]
    assert positions == sorted(positions)
    assert v.choice == TIE and v.status == "tie"


def test_reask_then_unparseable():
    answers = iter(["I think both are fine", "Summary 2"])
    gen = ScriptedGenerator(fallback=lambda req, i: next(answers))
    v = pairwise_judge(gen, "Q?", SUMMARIES, seed=1)
    assert gen.calls == 2 and v.label == "Summary 2" and v.choice == v.presented[1]
    bad = pairwise_judge(ScriptedGenerator(fallback="constant:Summary 9"), "Q?", SUMMARIES, seed=1)
    assert bad.status == "unparseable" and bad.choice is None and len(bad.raw) == 2


@pytest.mark.parametrize("text,label", [
    ("Summary 2", "Summary 2"), ("[Summary 1]", "Summary 1"), ("Choice: Tie", "Tie"), ("'summary 3'.", "Summary 3"),
    ("Summary 4", None), ("Summary 1 because it is better", None), ("", None),
])
def test_label_parsing(text, label):
    assert parse_judge_label(text, 3) == label


def test_judge_input_validation():
    with pytest.raises(ValueError):
        pairwise_judge(ScriptedGenerator(fallback="constant:Tie"), "Q", {"a": "x"})
    with pytest.raises(ValueError):
        pairwise_judge(ScriptedGenerator(fallback="constant:Tie"), "Q", [("a", "x"), ("a", "y")])


@pytest.mark.parametrize("n", [2, 3, 4])
def test_permutation_positions_are_balanced(n):
    counts = Counter()
    for seed in range(1000):
        for pos, system in enumerate(judge_permutation(n, seed)):
            counts[pos, system] += 1
    expected = 1000 / n
    assert all(abs(counts[p, s] - expected) <= 0.05 * 1000 for p in range(n) for s in range(n))
    chi2 = sum((counts[p, s] - expected) ** 2 / expected for p in range(n) for s in range(n))
    # generous bound: (n-1)^2 degrees of freedom, far above the 99.9% quantile
    assert chi2 < 4 * (n - 1) ** 2 + 20


def test_verdicts_file(tmp_path):
    v = pairwise_judge(ScriptedGenerator(fallback="constant:Summary 1"), "Q?", SUMMARIES, seed=0, qid="q1")
    row = json.loads(write_judge_verdicts(tmp_path, [v]).read_text())
    assert row["status"] == "ok" and row["qid"] == "q1" and row["choice"] == v.choice
    assert JudgeVerdict(**{k: (tuple(x) if isinstance(x, list) else x) for k, x in row.items()
                           if k != "status"}) == v


# -- accounting -------------------------------------------------------------------------

def _write_run(root, mode, tokenizer="whitespace", timings=None, prompt="a b c"):
    (root / "traces").mkdir(parents=True)
    trace = {"qid": "q1", "mode": mode, "reader_prompt": prompt, "compressor_input": "x y",
             "error": None, "token_counts": {"tokenizer": tokenizer},
             "timings": timings or {"retrieve": 0.25, "compress": 0.5, "answer": 1.0, "total": 1.75}}
    (root / "traces" / "q1.json").write_text(json.dumps(trace))
    (root / "run_manifest.json").write_text(json.dumps({"config": {"pipeline": {"tokenizer": tokenizer}}}))
    return root


def test_accounting_sums_and_counts(tmp_path):
    report = token_accounting([_write_run(tmp_path / "a", "kcomp")])
    s = report.modes["kcomp"]
    assert s.mean_prompt_tokens == 3 and s.mean_compressor_input_tokens == 2
    assert (s.compression_s, s.inference_s, s.total_s) == (0.75, 1.0, 1.75)


def test_accounting_rejects_tokenizer_mismatch(tmp_path):
    run = _write_run(tmp_path / "a", "kcomp", tokenizer="bpe")
    with pytest.raises(AccountingError, match="tokenizer"):
        token_accounting([run])


def test_accounting_rejects_non_additive_times(tmp_path):
    run = _write_run(tmp_path / "a", "kcomp", timings={"retrieve": 0.25, "answer": 1.0, "total": 2.0})
    with pytest.raises(AccountingError, match="total"):
        token_accounting([run])


def test_accounting_needs_traces(tmp_path):
    with pytest.raises(AccountingError, match="kcomp run"):
        token_accounting([tmp_path])


def test_accounting_on_real_traces(tmp_path, make_pipeline):
    for mode in ("top1", "topk", "kcomp"):
        root = tmp_path / mode / "traces"
        root.mkdir(parents=True)
        trace = make_pipeline(mode, clock="wall").run("What is insulin?", "q1")
        (root / "q1.json").write_text(trace.dumps())
    report = token_accounting([tmp_path / m for m in ("top1", "topk", "kcomp")])
    m = report.modes
    assert m["top1"].mean_prompt_tokens < m["topk"].mean_prompt_tokens
    assert m["kcomp"].mean_prompt_tokens < m["topk"].mean_prompt_tokens
    for s in m.values():
        assert math.isclose(s.total_s, s.compression_s + s.inference_s, rel_tol=1e-9, abs_tol=1e-9)


# -- statistics --------------------------------------------------------------------------

def test_dataset_stats_from_file(tmp_path):
    path = tmp_path / "decisions.jsonl"
    path.write_text("".join(json.dumps(d.to_json()) + "\n" for d in table_decisions("BioASQ")))
    stats = dataset_stats(load_decisions(path))
    assert (stats.splits["test"].original, stats.splits["test"].kept, stats.splits["test"].percent) == (707, 647, 8.4)
