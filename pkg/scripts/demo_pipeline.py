"""End-to-end demo on the bundled corpus with stub backends.

Writes a small workspace, then drives the CLI through ingest, index, run,
dataset building, and the three evaluations. Nothing leaves the machine.

    python scripts/demo_pipeline.py --workdir /tmp/kcomp-demo
"""
import argparse
import json
import sys
import tempfile
from pathlib import Path

from kcomp.cli import main as kcomp
from kcomp.fixtures import demo_corpus_lines, demo_questions

CONFIG = """\
[run]
out = run
questions = questions.jsonl
clock = logical

[corpus]
paths = corpus.jsonl
store = store
max_tokens = 64

[backend.embedder]
kind = stub:hash_embedder
dim = 64
"""


def write_workspace(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "corpus.jsonl").write_text("\n".join(demo_corpus_lines()) + "\n")
    (root / "questions.jsonl").write_text("".join(
        json.dumps({"qid": q.qid, "question": q.question, "answer": q.gold_answer, "split": q.split}) + "\n"
        for q in demo_questions()))
    (root / "demo.ini").write_text(CONFIG)
    return root / "demo.ini"


def step(*argv):
    print(f"\n$ kcomp {' '.join(argv)}", flush=True)
    code = kcomp(list(argv))
    if code != 0:
        sys.exit(f"step failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description="kcomp demo on stub backends")
    ap.add_argument("--workdir", help="workspace directory (default: a fresh temp dir)")
    args = ap.parse_args()
    root = Path(args.workdir or tempfile.mkdtemp(prefix="kcomp-demo-")).resolve()
    cfg = str(write_workspace(root))
    prep, run = str(root / "prep"), root / "run"

    step("ingest", "--config", cfg, "--out", prep)
    step("index", "--config", cfg, "--out", prep)
    step("search", "What", "causes", "Down", "syndrome?", "--k", "3", "--config", cfg)
    step("answer", "What are the symptoms of Down syndrome?", "--config", cfg, "--out", prep)
    for mode in ("top1", "topk", "kcomp"):
        step("run", "--mode", mode, "--config", cfg, "--out", str(run / mode))
    step("eval-speed", "--runs", *(str(run / m) for m in ("top1", "topk", "kcomp")), "--config", cfg)
    step("eval-judge", "--runs", str(run / "topk"), str(run / "kcomp"), "--config", cfg)
    step("eval-rerank", "--config", cfg)
    step("build-dataset", "--config", cfg)
    step("export-training", "--with-ids", "--config", cfg)
    print(f"\nartifacts under {run}")


if __name__ == "__main__":
    main()
