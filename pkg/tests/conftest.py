import json
import os

import pytest
from hypothesis import HealthCheck, settings

from kcomp.backends import HashEmbedder, ScriptedGenerator
from kcomp.corpus import ChunkPolicy, CorpusStore
from kcomp.fixtures import demo_corpus_lines, demo_questions
from kcomp.masking import EntityRecognizer
from kcomp.pipeline import Pipeline, PipelineConfig
from kcomp.retrieval import Retriever, index_store

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def demo_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo") / "store"
    store = CorpusStore(root)
    store.ingest(demo_corpus_lines(), ChunkPolicy(max_tokens=64))
    store.seal()
    return store


@pytest.fixture(scope="session")
def demo_embedder():
    return HashEmbedder(dim=64)


@pytest.fixture(scope="session")
def demo_retriever(demo_store, demo_embedder):
    index = index_store(demo_store, demo_embedder)
    return Retriever(demo_store, index, demo_embedder)


@pytest.fixture
def demo_recognizer(demo_store):
    return EntityRecognizer(demo_store.knowledge)


@pytest.fixture
def make_pipeline(demo_retriever, demo_recognizer):
    def build(mode="kcomp", compressor="lead_compressor", reader="echo_last_section", **cfg):
        return Pipeline(
            demo_retriever, demo_recognizer,
            ScriptedGenerator(fallback=compressor), ScriptedGenerator(fallback=reader),
            PipelineConfig(mode=mode, clock=cfg.pop("clock", "logical"), **cfg),
        )
    return build


@pytest.fixture
def demo_workspace(tmp_path):
    """Corpus, questions and an INI config on disk, ready for the CLI."""
    (tmp_path / "corpus.jsonl").write_text("\n".join(demo_corpus_lines()) + "\n")
    (tmp_path / "questions.jsonl").write_text("\n".join(
        json.dumps({"qid": q.qid, "question": q.question, "answer": q.gold_answer, "split": q.split})
        for q in demo_questions()) + "\n")
    (tmp_path / "demo.ini").write_text(
        "[run]\nout = run\nquestions = questions.jsonl\nclock = logical\nmax_workers = 2\n\n"
        "[corpus]\npaths = corpus.jsonl\nstore = store\nmax_tokens = 64\n\n"
        "[backend.embedder]\nkind = stub:hash_embedder\ndim = 64\n"
    )
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
