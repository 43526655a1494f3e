"""Prompt length and time split per mode on a synthetic corpus.

Every document has exactly T whitespace tokens and fits one chunk, so a
top-k prompt should cost roughly (k - 1) * T more tokens than a top-1 prompt.

    python scripts/token_accounting_demo.py --tokens-per-doc 120 --questions 50
"""
import argparse
import tempfile
from pathlib import Path

from kcomp.backends import HashEmbedder, ScriptedGenerator
from kcomp.corpus import ChunkPolicy, CorpusStore
from kcomp.evaluation import token_accounting
from kcomp.fixtures import synthetic_corpus_lines
from kcomp.masking import EntityRecognizer
from kcomp.pipeline import Pipeline, PipelineConfig
from kcomp.retrieval import Retriever, index_store

MODES = ("top1", "topk", "summary_only", "kcomp")


def main():
    ap = argparse.ArgumentParser(description="token accounting on a synthetic corpus")
    ap.add_argument("--docs", type=int, default=200)
    ap.add_argument("--tokens-per-doc", type=int, default=120)
    ap.add_argument("--questions", type=int, default=50)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    T = args.tokens_per_doc

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        store = CorpusStore(tmp / "store")
        store.ingest(synthetic_corpus_lines(args.docs, T, args.seed),
                     ChunkPolicy(max_tokens=T, sentence_aware=False))
        store.seal()
        embedder = HashEmbedder(128, seed=args.seed)
        retriever = Retriever(store, index_store(store, embedder), embedder)
        recognizer = EntityRecognizer(store.knowledge)
        questions = [f"What does topic{i:04d} report about the signal?" for i in range(args.questions)]
        for mode in MODES:
            pipe = Pipeline(retriever, recognizer, ScriptedGenerator(fallback="lead_compressor"),
                            ScriptedGenerator(fallback="echo_last_section"),
                            PipelineConfig(mode=mode, k=args.k, clock="wall"))
            traces = tmp / mode / "traces"
            traces.mkdir(parents=True)
            for i, q in enumerate(questions):
                (traces / f"q{i:04d}.json").write_text(pipe.run(q, f"q{i:04d}").dumps())
        report = token_accounting([tmp / m for m in MODES])

    print(f"{'mode':<13} {'prompt tok':>10} {'compress s':>11} {'infer s':>9} {'total s':>9}")
    for mode in MODES:
        s = report.modes[mode]
        print(f"{mode:<13} {s.mean_prompt_tokens:>10.1f} {s.compression_s:>11.4f} "
              f"{s.inference_s:>9.4f} {s.total_s:>9.4f}")
    top1 = report.modes["top1"].mean_prompt_tokens
    print(f"\npredicted top{args.k} = top1 + {args.k - 1}*T = {top1 + (args.k - 1) * T:.1f}")


if __name__ == "__main__":
    main()
