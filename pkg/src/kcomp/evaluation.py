"""Measurement protocols: reranker preference, token/time accounting, pairwise judging."""
from __future__ import annotations

import json
import logging
import math
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .codec import count_tokens
from .dataset import FilterDecision, FilterStats
from .masking import mask_question
from .pipeline import DecodeParams, compress
from .prompts import TIE, render_judge_prompt, render_judge_reask, summary_labels

log = logging.getLogger(__name__)

GENERATED = "generated"
RETRIEVED = "retrieved"
DEFAULT_KS = (1, 5, 10, 20)


class EvaluationError(RuntimeError):
    pass


class AccountingError(EvaluationError):
    pass


# -- reranking preference -------------------------------------------------------

@dataclass(frozen=True)
class RerankCandidate:
    cid: str
    origin: str
    text: str
    score: float = float("nan")


def context_text(ctx) -> str:
    """What a reader would see of a compressed context: entity lines, then the summary."""
    lines = [f"{e.surface}: {e.description}" for e in ctx.entries]
    return "\n".join(lines + [ctx.summary])


@dataclass
class QuestionOutcome:
    qid: str
    top_origins: list[str]
    hits: dict[str, dict[int, bool]]
    tied_pairs: int = 0
    duplicates: list[list[str]] = field(default_factory=list)
    candidates: list[dict] = field(default_factory=list)


@dataclass
class RecallReport:
    ks: tuple[int, ...]
    generated: dict[int, float]
    retrieved: dict[int, float]
    evaluated: int
    flagged: dict[str, str]
    per_question: list[QuestionOutcome]

    def to_json(self) -> dict:
        return {
            "ks": list(self.ks),
            "recall": {
                GENERATED: {str(k): v for k, v in self.generated.items()},
                RETRIEVED: {str(k): v for k, v in self.retrieved.items()},
            },
            "evaluated": self.evaluated,
            "flagged_count": len(self.flagged),
            "flagged": dict(sorted(self.flagged.items())),
            "tie_policy": "equal scores ordered by candidate id; ids assigned after a seeded shuffle",
            "duplicate_policy": "byte-equal candidates kept; origin follows the higher-scored instance",
            "questions": [
                {
                    "qid": o.qid,
                    "top_origins": o.top_origins,
                    "hits": {origin: {str(k): v for k, v in h.items()} for origin, h in o.hits.items()},
                    "tied_pairs": o.tied_pairs,
                    "duplicates": o.duplicates,
                    "candidates": o.candidates,
                }
                for o in self.per_question
            ],
        }


def sample_contexts(compressor, masked_question: str, passages: Sequence[str], n: int = 10,
                    max_attempts: int = 30, temperature: float = 1.0) -> list[str]:
    """Up to ``n`` distinct sampled contexts, in first-seen order."""
    params = DecodeParams(temperature=temperature)
    seen: dict[str, None] = {}
    for _ in range(max_attempts):
        if len(seen) >= n:
            break
        try:
            ctx = compress(compressor, masked_question, passages, params)
        except ValueError as exc:
            log.info("discarding malformed sample: %s", exc)
            continue
        seen.setdefault(context_text(ctx), None)
    return list(seen)[:n]


def rank_candidates(cands: Sequence[RerankCandidate]) -> tuple[list[RerankCandidate], int]:
    """Order by score (desc), ties by candidate id; also count tied pairs."""
    ordered = sorted(cands, key=lambda c: (-c.score, c.cid))
    ties = sum(1 for a, b in zip(ordered, ordered[1:]) if a.score == b.score)
    return ordered, ties


def attribute_origins(ordered: Sequence[RerankCandidate]) -> tuple[list[str], list[list[str]]]:
    """Origin per ranked position; byte-equal duplicates take the origin of the best-ranked copy."""
    first_origin: dict[str, str] = {}
    groups: dict[str, list[str]] = {}
    for c in ordered:
        first_origin.setdefault(c.text, c.origin)
        groups.setdefault(c.text, []).append(c.cid)
    dups = [ids for ids in groups.values() if len(ids) > 1]
    return [first_origin[c.text] for c in ordered], dups


def score_question(qid: str, question: str, generated: Sequence[str], retrieved: Sequence[str],
                   reranker, ks: Sequence[int], seed: int = 0) -> QuestionOutcome:
    pool = [(GENERATED, t) for t in generated] + [(RETRIEVED, t) for t in retrieved]
    order = list(range(len(pool)))
    random.Random(f"{seed}:{qid}").shuffle(order)
    cands = [RerankCandidate(f"c{slot:02d}", pool[i][0], pool[i][1]) for slot, i in enumerate(order)]
    scores = reranker.rerank(question, [c.text for c in cands])
    if len(scores) != len(cands) or not all(math.isfinite(float(s)) for s in scores):
        raise EvaluationError(f"{qid}: reranker returned {len(scores)} scores for {len(cands)} candidates")
    cands = [RerankCandidate(c.cid, c.origin, c.text, float(s)) for c, s in zip(cands, scores)]
    ordered, ties = rank_candidates(cands)
    origins, dups = attribute_origins(ordered)
    if dups:
        log.info("%s: duplicate candidates %s", qid, dups)
    hits = {
        origin: {k: origin in origins[:k] for k in ks}
        for origin in (GENERATED, RETRIEVED)
    }
    return QuestionOutcome(
        qid, origins, hits, ties, dups,
        [{"cid": c.cid, "origin": c.origin, "score": c.score} for c in ordered],
    )


def rerank_recall(
    questions: Sequence[tuple[str, str]],
    compressor,
    retriever,
    reranker,
    ks: Sequence[int] = DEFAULT_KS,
    recognizer=None,
    n_generated: int = 10,
    n_retrieved: int = 10,
    context_k: int = 5,
    max_attempts: int = 30,
    seed: int = 0,
    max_workers: int = 1,
) -> RecallReport:
    """For each question, sample contexts at temperature 1, pool them with retrieved
    passages, rerank the pool and record whether each origin reaches the top K."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1 or ks[-1] > n_generated + n_retrieved:
        raise ValueError(f"K values must lie in [1, {n_generated + n_retrieved}]")

    def one(item):
        qid, question = item
        mentions = recognizer.recognize(question) if recognizer is not None else []
        masked = mask_question(question, mentions).masked
        passages = retriever.retrieve(question, max(n_retrieved, context_k))
        rendered = [p.render() for p in passages]
        if len(rendered) < n_retrieved:
            return qid, None, f"only {len(rendered)} passages retrievable"
        generated = sample_contexts(compressor, masked, rendered[:context_k], n_generated, max_attempts)
        if len(generated) < n_generated:
            return qid, None, f"{len(generated)} distinct generations after {max_attempts} attempts"
        return qid, score_question(qid, question, generated, rendered[:n_retrieved], reranker, ks, seed), None

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, questions))
    else:
        results = [one(q) for q in questions]

    outcomes, flagged = [], {}
    for qid, outcome, problem in results:
        if problem:
            flagged[qid] = problem
        else:
            outcomes.append(outcome)
    n = len(outcomes)

    def frac(origin, k):
        return sum(o.hits[origin][k] for o in outcomes) / n if n else 0.0

    return RecallReport(
        ks,
        {k: frac(GENERATED, k) for k in ks},
        {k: frac(RETRIEVED, k) for k in ks},
        n, flagged, outcomes,
    )


# -- token and time accounting ----------------------------------------------------

@dataclass
class ModeSpeed:
    questions: int = 0
    prompt_tokens: int = 0
    compressor_input_tokens: int = 0
    compression_s: float = 0.0
    inference_s: float = 0.0
    total_s: float = 0.0

    @property
    def mean_prompt_tokens(self) -> float:
        return self.prompt_tokens / self.questions if self.questions else 0.0

    @property
    def mean_compressor_input_tokens(self) -> float:
        return self.compressor_input_tokens / self.questions if self.questions else 0.0

    def to_json(self) -> dict:
        return {
            "questions": self.questions,
            "mean_prompt_tokens": self.mean_prompt_tokens,
            "mean_compressor_input_tokens": self.mean_compressor_input_tokens,
            "compression_s": self.compression_s,
            "inference_s": self.inference_s,
            "total_s": self.total_s,
        }


@dataclass
class SpeedReport:
    tokenizer: str
    modes: dict[str, ModeSpeed]

    def to_json(self) -> dict:
        return {"tokenizer": self.tokenizer, "modes": {m: s.to_json() for m, s in sorted(self.modes.items())}}


def load_traces(run_dir: os.PathLike | str) -> list[dict]:
    tdir = Path(run_dir) / "traces"
    if not tdir.is_dir():
        raise AccountingError(f"{run_dir} has no traces/ directory; run `kcomp run` first")
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted(tdir.glob("*.json"))]


def token_accounting(run_dirs: Iterable[os.PathLike | str], tokenizer_name: str = "whitespace") -> SpeedReport:
    """Recount prompt tokens from traces and sum stage times per mode.

    Everything before the reader call (retrieval, masking, compression, prompt
    rendering) counts as compression time; the reader call is inference time.
    """
    resolution = max(time.get_clock_info("perf_counter").resolution, 1e-9)
    modes: dict[str, ModeSpeed] = {}
    for run_dir in run_dirs:
        manifest_path = Path(run_dir) / "run_manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            used = manifest.get("config", {}).get("pipeline", {}).get("tokenizer", manifest.get("tokenizer"))
            if used is not None and used != tokenizer_name:
                raise AccountingError(f"{run_dir} was recorded with tokenizer {used!r}, not {tokenizer_name!r}")
        for tr in load_traces(run_dir):
            recorded = tr.get("token_counts", {}).get("tokenizer")
            if recorded is not None and recorded != tokenizer_name:
                raise AccountingError(f"trace {tr['qid']} used tokenizer {recorded!r}, not {tokenizer_name!r}")
            if tr.get("error") or tr.get("reader_prompt") is None:
                continue
            s = modes.setdefault(tr["mode"], ModeSpeed())
            s.questions += 1
            s.prompt_tokens += count_tokens(tr["reader_prompt"], tokenizer_name)
            if tr.get("compressor_input"):
                s.compressor_input_tokens += count_tokens(tr["compressor_input"], tokenizer_name)
            timings = tr["timings"]
            comp = math.fsum(v for k, v in timings.items() if k not in ("answer", "total"))
            inf = timings.get("answer", 0.0)
            total = timings.get("total", comp + inf)
            if abs(total - (comp + inf)) > resolution * len(timings):
                raise AccountingError(
                    f"trace {tr['qid']}: total {total!r} != compression {comp!r} + inference {inf!r}")
            s.compression_s += comp
            s.inference_s += inf
            s.total_s += total
    return SpeedReport(tokenizer_name, modes)


# -- pairwise judge ---------------------------------------------------------------

@dataclass(frozen=True)
class JudgeVerdict:
    qid: str
    seed: int
    systems: tuple[str, ...]        # caller's order
    presented: tuple[str, ...]      # system shown as Summary 1, Summary 2, ...
    permutation: tuple[int, ...]    # presented[i] == systems[permutation[i]]
    choice: Optional[str]           # a system name, "Tie", or None if unparseable
    label: Optional[str]            # the judge's label, e.g. "Summary 2"
    raw: tuple[str, ...]            # judge outputs (two if re-asked)

    @property
    def status(self) -> str:
        if self.choice is None:
            return "unparseable"
        return "tie" if self.choice == TIE else "ok"

    def to_json(self) -> dict:
        d = asdict(self)
        d["status"] = self.status
        return d


def judge_permutation(n: int, seed: int) -> list[int]:
    return random.Random(seed).sample(range(n), n)


_LABEL_NOISE = re.compile(r"^(?:choice\s*:\s*)?[\s\[\(\"'*]*|[\s\]\)\"'*.!]*$", re.I)


def parse_judge_label(text: str, n: int) -> Optional[str]:
    """Exact label match after trimming brackets, quotes and a ``Choice:`` prefix."""
    cleaned = _LABEL_NOISE.sub("", text.strip()).casefold()
    for label in summary_labels(n) + [TIE]:
        if cleaned == label.casefold():
            return label
    return None


def pairwise_judge(judge, question: str, summaries: Mapping[str, str] | Sequence[tuple[str, str]],
                   seed: int = 0, qid: str = "", params: DecodeParams = DecodeParams(max_new_tokens=16)
                   ) -> JudgeVerdict:
    items = list(summaries.items()) if isinstance(summaries, Mapping) else list(summaries)
    systems = tuple(name for name, _ in items)
    if len(set(systems)) != len(systems):
        raise ValueError("system names must be distinct")
    n = len(items)
    perm = tuple(judge_permutation(n, seed))
    presented = tuple(systems[i] for i in perm)
    prompt = render_judge_prompt(question, [items[i][1] for i in perm])
    raw = [judge.generate(params.request(prompt)).text]
    label = parse_judge_label(raw[0], n)
    if label is None:
        raw.append(judge.generate(params.request(render_judge_reask(prompt, n))).text)
        label = parse_judge_label(raw[1], n)
    if label is None:
        choice = None
    elif label == TIE:
        choice = TIE
    else:
        choice = presented[int(label.split()[-1]) - 1]
    return JudgeVerdict(qid, seed, systems, presented, perm, choice, label, tuple(raw))


# -- dataset statistics & report files -------------------------------------------

def dataset_stats(decisions: Iterable[FilterDecision]) -> FilterStats:
    return FilterStats.from_decisions(decisions)


def load_decisions(path: os.PathLike | str) -> list[FilterDecision]:
    with open(path, encoding="utf-8") as fh:
        return [FilterDecision.from_json(json.loads(l)) for l in fh if l.strip()]


def write_json(path: os.PathLike | str, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def write_recall_report(out_dir, report: RecallReport) -> Path:
    return write_json(Path(out_dir) / "recall_report.json", report.to_json())


def write_speed_report(out_dir, report: SpeedReport) -> Path:
    return write_json(Path(out_dir) / "speed_report.json", report.to_json())


def write_judge_verdicts(out_dir, verdicts: Iterable[JudgeVerdict]) -> Path:
    path = Path(out_dir) / "judge_verdicts.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
    return path


def write_filter_stats(out_dir, stats: FilterStats) -> Path:
    return write_json(Path(out_dir) / "filter_stats.json", stats.to_json())
