"""``kcomp`` command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, bad input, missing
prerequisite), 2 runtime failure (backend errors, lock held, I/O).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from . import __version__
from .backends import BackendError
from .codec import SequenceTemplate, WhitespaceTokenizer, export_training_record
from .config import BackendRegistry, ConfigError, RunConfig, file_digest, load_config
from .corpus import CorpusError, CorpusStore
from .dataset import DatasetBuilder, QAExample, emit_dataset, load_records
from .evaluation import (
    dataset_stats,
    load_decisions,
    pairwise_judge,
    rerank_recall,
    token_accounting,
    write_filter_stats,
    write_judge_verdicts,
    write_recall_report,
    write_speed_report,
)
from .fixtures import FILTER_TABLE, table_decisions
from .masking import EntityRecognizer, mask_question
from .pipeline import MODES, Pipeline, compress
from .prompts import QUESTION_HEADER, render_judge_prompt, render_synthesis_prompt
from .retrieval import Retriever, index_store, load_index

log = logging.getLogger("kcomp")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
MANIFEST_VERSION = 1


class PrerequisiteError(ConfigError):
    pass


class LockError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


@contextmanager
def run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / ".kcomp.lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{directory} is in use by another kcomp process "
                        f"(remove {path} if that process is gone)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# -- shared helpers ---------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))


def _store(cfg: RunConfig) -> CorpusStore:
    if not cfg.store_dir.joinpath("manifest.json").exists():
        raise PrerequisiteError(f"no sealed corpus under {cfg.store_dir}; run `kcomp ingest` first")
    return CorpusStore.open(cfg.store_dir)


def _recognizer(cfg: RunConfig, store: CorpusStore, reg: BackendRegistry) -> EntityRecognizer:
    policy = cfg.recognizer_policy()
    ner = None
    if policy.mode == "external_ner":
        spec = cfg.backend_spec("ner")
        if spec.kind == "stub" and spec.stub == "echo_ner" and "surfaces" not in spec.options \
                and "ner" not in reg.instances:
            from .backends import EchoNER
            reg.instances["ner"] = EchoNER([e.surface for e in store.knowledge])
        ner = reg.get("ner")
    return EntityRecognizer(store.knowledge, policy, ner)


def _retriever(cfg: RunConfig, store: CorpusStore, reg: BackendRegistry) -> Retriever:
    if not cfg.index_dir.joinpath("index.meta.json").exists():
        raise PrerequisiteError(f"no index under {cfg.index_dir}; run `kcomp index` first")
    return Retriever(store, load_index(cfg.index_dir), reg.get("embedder"), cfg.embed_prefix)


def _questions(cfg: RunConfig, args) -> tuple[list[QAExample], Optional[Path]]:
    src = getattr(args, "questions", None) or cfg.questions
    if not src:
        raise ConfigError("no questions file; set [run] questions or pass --questions")
    path = cfg.path(src) if not getattr(args, "questions", None) else Path(src)
    if not path.exists():
        raise ConfigError(f"questions file {path} does not exist")
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(QAExample.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{n}: bad question record ({exc})") from None
    qids = [q.qid for q in out]
    if len(set(qids)) != len(qids):
        raise ConfigError(f"{path}: duplicate qids")
    return out, path


def _single_question(args) -> str:
    text = " ".join(args.text) or args.question
    if not text:
        raise ConfigError("pass the question as an argument")
    return text


def _manifest(cfg: RunConfig, command: str, inputs: dict, extra: dict) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "kcomp_version": __version__,
        "command": command,
        "config": cfg.to_json(),
        "inputs": inputs,
        **extra,
    }


# -- subcommands --------------------------------------------------------------------

def cmd_ingest(cfg, args, reg):
    if not cfg.corpus_paths:
        raise ConfigError("no corpus files; set [corpus] paths")
    store = CorpusStore(cfg.store_dir)
    if store.sealed:
        raise ConfigError(f"{cfg.store_dir} is already sealed; use a fresh --out directory")
    lines = []
    for p in cfg.corpus_paths:
        path = cfg.path(p)
        if not path.exists():
            raise ConfigError(f"corpus file {path} does not exist")
        lines.extend(path.read_text(encoding="utf-8").splitlines())
    if args.dry_run:
        _emit({"dry_run": True, "records": sum(1 for l in lines if l.strip()), "store": str(cfg.store_dir)})
        return EXIT_OK
    stats = store.ingest(lines, cfg.chunk)
    manifest = store.seal()
    report = {"ingest": stats.to_dict(), "store": manifest}
    _write_json(cfg.out_dir / "ingest_report.json", report)
    _emit(report)
    return EXIT_OK


def cmd_index(cfg, args, reg):
    store = _store(cfg)
    if args.dry_run:
        _emit({"dry_run": True, "chunks": len(store.chunks()), "kind": cfg.index_kind})
        return EXIT_OK
    index = index_store(store, reg.get("embedder"), cfg.index_kind, cfg.graph, cfg.embed_prefix,
                        max_inflight=cfg.max_workers, directory=cfg.index_dir)
    _emit({"kind": cfg.index_kind, "count": index.count, "dim": index.dim, "path": str(cfg.index_dir)})
    return EXIT_OK


def cmd_search(cfg, args, reg):
    question = _single_question(args)
    store = _store(cfg)
    retriever = _retriever(cfg, store, reg)
    _emit([{"rank": p.rank, "chunk_id": p.chunk_id, "score": p.score, "title": p.title}
           for p in retriever.retrieve(question, cfg.k)])
    return EXIT_OK


def cmd_build_dataset(cfg, args, reg):
    examples, qpath = _questions(cfg, args)
    store = _store(cfg)
    recognizer = _recognizer(cfg, store, reg)
    out = cfg.out_dir / "dataset"
    if args.dry_run:
        previews = []
        for ex in examples:
            mentions = recognizer.recognize(ex.question)
            surfaces = list(dict.fromkeys(m.surface for m in mentions))
            previews.append({
                "qid": ex.qid,
                "masked_question": mask_question(ex.question, mentions).masked,
                "synthesis_prompt": render_synthesis_prompt(
                    [f"{{{{Top-{cfg.k} retrieved passages}}}}"], surfaces) if surfaces else None,
            })
        _emit(previews)
        return EXIT_OK
    builder = DatasetBuilder(recognizer, _retriever(cfg, store, reg), reg.get("synthesizer"), cfg.k,
                             max_workers=cfg.max_workers)
    result = builder.build(examples)
    stats = emit_dataset(result.records, result.decisions, out / "dataset.jsonl")
    _write_json(out / "flagged.json", result.flagged)
    _write_json(out / "build_manifest.json", _manifest(
        cfg, "build-dataset", {"questions": {"path": str(qpath), "digest": file_digest(qpath)}},
        {"records": len(result.records), "flagged": len(result.flagged)}))
    print(stats.table())
    return EXIT_OK


def cmd_export_training(cfg, args, reg):
    path = cfg.out_dir / "dataset" / "dataset.jsonl"
    if not path.exists():
        raise PrerequisiteError(f"no dataset at {path}; run `kcomp build-dataset` first")
    tokenizer = WhitespaceTokenizer() if args.with_ids else None
    written: dict[str, int] = {}
    rows: dict[str, list[str]] = {}
    for rec in load_records(path):
        if rec.split == "test" or not rec.entries or not rec.gold_summary:
            continue
        template = SequenceTemplate.build(rec.masked_question, rec.passages, rec.entries,
                                          rec.gold_summary, cfg.input_order)
        row = {"qid": rec.qid, **export_training_record(template, tokenizer)}
        rows.setdefault(rec.split, []).append(json.dumps(row, ensure_ascii=False))
    out = cfg.out_dir / "training"
    out.mkdir(parents=True, exist_ok=True)
    for split, lines in sorted(rows.items()):
        (out / f"{split}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        written[split] = len(lines)
    _emit({"written": written, "path": str(out)})
    return EXIT_OK


def _pipeline(cfg, reg, store, mode) -> Pipeline:
    recognizer = _recognizer(cfg, store, reg)

    class _Lazy:
        """Defers backend construction until a call is actually made."""

        def __init__(self, role):
            self.role = role

        def __getattr__(self, name):
            return getattr(reg.get(self.role), name)

    retriever = None
    if cfg.index_dir.joinpath("index.meta.json").exists():
        retriever = Retriever(store, load_index(cfg.index_dir), _Lazy("embedder"), cfg.embed_prefix)
    return Pipeline(retriever, recognizer, _Lazy("compressor"), _Lazy("reader"), cfg.pipeline_config(mode))


def cmd_compress(cfg, args, reg):
    question = _single_question(args)
    store = _store(cfg)
    pipe = _pipeline(cfg, reg, store, "kcomp")
    if args.dry_run:
        _emit(pipe.dry_run(question, "kcomp"))
        return EXIT_OK
    retriever = _retriever(cfg, store, reg)
    masked = pipe.mask(question)
    passages = [p.render() for p in retriever.retrieve(question, cfg.k)]
    ctx = compress(reg.get("compressor"), masked.masked, passages, cfg.compressor_params, cfg.input_order)
    _emit({"masked_question": masked.masked,
           "entries": [{"surface": e.surface, "description": e.description} for e in ctx.entries],
           "summary": ctx.summary, "warnings": list(ctx.warnings)})
    return EXIT_OK


def cmd_answer(cfg, args, reg):
    question = _single_question(args)
    store = _store(cfg)
    pipe = _pipeline(cfg, reg, store, cfg.mode)
    if args.dry_run:
        _emit(pipe.dry_run(question))
        return EXIT_OK
    _retriever(cfg, store, reg)
    trace = pipe.run(question, qid="adhoc")
    if trace.error:
        print(trace.dumps(), file=sys.stderr)
        return EXIT_RUNTIME
    print(trace.answer)
    return EXIT_OK


def cmd_run(cfg, args, reg):
    examples, qpath = _questions(cfg, args)
    store = _store(cfg)
    pipe = _pipeline(cfg, reg, store, cfg.mode)
    out = cfg.out_dir
    inputs = {"questions": {"path": str(qpath), "digest": file_digest(qpath)},
              "store": store.manifest()}
    if args.dry_run:
        for ex in examples:
            _write_json(out / "dry_run" / f"{ex.qid}.json", {"qid": ex.qid, **pipe.dry_run(ex.question)})
        _write_json(out / "run_manifest.json", _manifest(
            cfg, "run", inputs, {"dry_run": True, "questions": len(examples)}))
        print(f"rendered {len(examples)} prompt skeletons under {out / 'dry_run'}")
        return EXIT_OK
    _retriever(cfg, store, reg)
    with ThreadPoolExecutor(cfg.max_workers) as pool:
        traces = list(pool.map(lambda ex: pipe.run(ex.question, ex.qid), examples))
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    answers = []
    for ex, tr in zip(examples, traces):
        (tdir / f"{ex.qid}.json").write_text(tr.dumps(), encoding="utf-8")
        answers.append(json.dumps({"qid": ex.qid, "mode": tr.mode, "question": ex.question,
                                   "answer": tr.answer, "gold_answer": ex.gold_answer,
                                   "error": tr.error}, sort_keys=True, ensure_ascii=False))
    (out / "answers.jsonl").write_text("\n".join(answers) + "\n", encoding="utf-8")
    errors = sum(1 for t in traces if t.error)
    _write_json(out / "run_manifest.json", _manifest(
        cfg, "run", inputs, {"dry_run": False, "questions": len(examples), "errors": errors}))
    print(f"{len(traces)} traces written to {tdir} ({errors} with errors)")
    return EXIT_OK if errors == 0 else EXIT_RUNTIME


def cmd_eval_rerank(cfg, args, reg):
    examples, _ = _questions(cfg, args)
    store = _store(cfg)
    if args.dry_run:
        _emit({"dry_run": True, "questions": len(examples), "ks": list(cfg.ks),
               "candidates_per_question": 20})
        return EXIT_OK
    report = rerank_recall(
        [(e.qid, e.question) for e in examples], reg.get("compressor"), _retriever(cfg, store, reg),
        reg.get("reranker"), cfg.ks, recognizer=_recognizer(cfg, store, reg), seed=cfg.seed,
        max_workers=cfg.max_workers,
    )
    write_recall_report(cfg.out_dir, report)
    _emit(report.to_json()["recall"] | {"evaluated": report.evaluated, "flagged": len(report.flagged)})
    return EXIT_OK


def cmd_eval_speed(cfg, args, reg):
    dirs = [Path(d) for d in (args.runs or [cfg.out_dir])]
    for d in dirs:
        if not (d / "traces").is_dir():
            raise PrerequisiteError(f"{d} has no traces; run `kcomp run` first")
    report = token_accounting(dirs, cfg.tokenizer)
    write_speed_report(cfg.out_dir, report)
    _emit(report.to_json())
    return EXIT_OK


def _context_of(trace: dict) -> str:
    prompt = trace.get("reader_prompt") or ""
    head, _, _ = prompt.rpartition("\n\n" + QUESTION_HEADER + "\n")
    return head


def _judge_items(cfg, args) -> list[dict]:
    if args.input:
        with open(args.input, encoding="utf-8") as fh:
            return [json.loads(l) for l in fh if l.strip()]
    if not args.runs or len(args.runs) < 2:
        raise ConfigError("eval-judge needs --input or at least two --runs")
    if len(args.runs) > 4:
        raise ConfigError("eval-judge compares at most four runs")
    names, by_run = [], []
    for i, d in enumerate(args.runs):
        d = Path(d)
        if not (d / "traces").is_dir():
            raise PrerequisiteError(f"{d} has no traces; run `kcomp run` first")
        name = d.name if d.name not in names else f"{d.name}#{i}"
        names.append(name)
        by_run.append({json.loads(p.read_text())["qid"]: json.loads(p.read_text())
                       for p in sorted((d / "traces").glob("*.json"))})
    items = []
    for qid in sorted(set.intersection(*(set(r) for r in by_run))):
        traces = [r[qid] for r in by_run]
        if any(t.get("error") for t in traces):
            continue
        items.append({"qid": qid, "question": traces[0]["question"],
                      "summaries": {n: _context_of(t) for n, t in zip(names, traces)}})
    return items


def cmd_eval_judge(cfg, args, reg):
    items = _judge_items(cfg, args)
    if args.dry_run:
        _emit([{"qid": it["qid"], "prompt": render_judge_prompt(it["question"], list(it["summaries"].values()))}
               for it in items])
        return EXIT_OK
    judge = reg.get("judge")
    verdicts = [
        pairwise_judge(judge, it["question"], it["summaries"], seed=cfg.seed * 1_000_003 + i, qid=str(it["qid"]))
        for i, it in enumerate(items)
    ]
    write_judge_verdicts(cfg.out_dir, verdicts)
    tally: dict[str, int] = {}
    for v in verdicts:
        key = v.choice if v.choice is not None else "unparseable"
        tally[key] = tally.get(key, 0) + 1
    _emit({"verdicts": len(verdicts), "tally": dict(sorted(tally.items()))})
    return EXIT_OK


def cmd_stats(cfg, args, reg):
    if args.fixture:
        if args.fixture not in FILTER_TABLE:
            raise ConfigError(f"unknown fixture {args.fixture!r}; choose from {sorted(FILTER_TABLE)}")
        decisions = table_decisions(args.fixture, cfg.seed)
    else:
        path = Path(args.decisions) if args.decisions else cfg.out_dir / "dataset" / "decisions.jsonl"
        if not path.exists():
            raise PrerequisiteError(f"no decisions at {path}; run `kcomp build-dataset` first")
        decisions = load_decisions(path)
    stats = dataset_stats(decisions)
    write_filter_stats(cfg.out_dir, stats)
    print(stats.table())
    return EXIT_OK


COMMANDS = {
    "ingest": (cmd_ingest, "ingest corpus JSONL into a sealed store"),
    "index": (cmd_index, "embed chunks and build the vector index"),
    "search": (cmd_search, "show the top-k chunks for a question"),
    "build-dataset": (cmd_build_dataset, "filter questions and synthesize gold summaries"),
    "export-training": (cmd_export_training, "write compressor training sequences"),
    "compress": (cmd_compress, "compress retrieved passages for one question"),
    "answer": (cmd_answer, "answer one question end to end"),
    "run": (cmd_run, "answer every question in the questions file, writing traces"),
    "eval-rerank": (cmd_eval_rerank, "reranker preference Recall@K"),
    "eval-speed": (cmd_eval_speed, "token and time accounting from run traces"),
    "eval-judge": (cmd_eval_judge, "pairwise judge over runs or an items file"),
    "stats": (cmd_stats, "dataset filtering statistics"),
}
NO_LOCK = {"search"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--k", type=int, help="passages to retrieve")
    common.add_argument("--seed", type=int)
    common.add_argument("--dry-run", action="store_true", help="render prompts, call no backend")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="kcomp", description="Knowledge-injected context compression for RAG QA")
    parser.add_argument("--version", action="version", version=f"kcomp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("search", "compress", "answer"):
            p.add_argument("text", nargs="*")
            p.add_argument("--question")
        if name in ("build-dataset", "run", "eval-rerank"):
            p.add_argument("--questions", help="questions JSONL (overrides [run] questions)")
        if name == "export-training":
            p.add_argument("--with-ids", action="store_true", help="include token ids and loss mask")
        if name in ("eval-speed", "eval-judge"):
            p.add_argument("--runs", nargs="+", help="run directories")
        if name == "eval-judge":
            p.add_argument("--input", help="JSONL of {qid, question, summaries: {system: text}}")
        if name == "stats":
            p.add_argument("--decisions", help="decisions.jsonl written by build-dataset")
            p.add_argument("--fixture", help=f"built-in decision streams: {', '.join(FILTER_TABLE)}")
    return parser


def main(argv=None, backends: Optional[dict] = None) -> int:
    """Entry point; ``backends`` pre-seeds role -> instance (used by tests)."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(mode=args.mode, k=args.k, seed=args.seed,
                                 out=str(Path(args.out).resolve()) if args.out else None)
        handler = COMMANDS[args.command][0]
        reg = BackendRegistry(cfg, backends)
        if args.command in NO_LOCK:
            return handler(cfg, args, reg)
        with run_lock(cfg.out_dir):
            return handler(cfg, args, reg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ConfigError, CorpusError) as exc:
        reason = f"[{exc.args[0]}] " if isinstance(exc, CorpusError) else ""
        detail = exc.args[1] if isinstance(exc, CorpusError) and len(exc.args) > 1 else str(exc)
        print(f"kcomp: error: {reason}{detail}", file=sys.stderr)
        return EXIT_INVALID
    except (BackendError, LockError, OSError) as exc:
        print(f"kcomp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"kcomp: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.exception("unexpected failure")
        print(f"kcomp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
