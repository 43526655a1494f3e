"""Run configuration: an INI file with ``${ENV_VAR}`` interpolation, overridable by flags.

Secrets never live in the file. Backend tokens come from ``KCOMP_<NAME>_TOKEN``
at construction time and are not part of the serialized configuration.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .backends import (
    BackendConfig,
    EmbedClient,
    GenerateClient,
    NERClient,
    RerankClient,
    StubSpec,
    make_stub,
)
from .codec import INPUT_LAYOUTS, PASSAGES_FIRST
from .corpus import ChunkPolicy
from .masking import RecognizerPolicy
from .pipeline import CLOCKS, ENTITY_FIRST, MODES, PASSAGE_FIRST, DecodeParams, PipelineConfig
from .prompts import PASSAGE_HEADER, READER_HEADERS
from .retrieval import GraphParams

ROLES = ("embedder", "compressor", "reader", "synthesizer", "reranker", "judge", "ner")
ROLE_CLIENTS = {
    "embedder": EmbedClient, "compressor": GenerateClient, "reader": GenerateClient,
    "synthesizer": GenerateClient, "judge": GenerateClient, "reranker": RerankClient, "ner": NERClient,
}
DEFAULT_STUBS = {
    "embedder": ("hash_embedder", {}),
    "compressor": ("scripted_generator", {"fallback": "lead_compressor"}),
    "reader": ("scripted_generator", {"fallback": "echo_last_section"}),
    "synthesizer": ("scripted_generator", {"fallback": "lead_summary"}),
    "reranker": ("lexical_reranker", {}),
    "judge": ("scripted_generator", {"fallback": "constant:Tie"}),
    "ner": ("echo_ner", {}),
}
SECRET_KEYS = {"token", "auth_token", "api_key", "password", "secret"}
INDEX_KINDS = ("exact_flat", "approximate_graph")


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 1."""


class EnvInterpolation(configparser.Interpolation):
    """``${NAME}`` is replaced by the environment variable ``NAME``; ``$$`` is a literal ``$``."""

    _VAR = re.compile(r"\$(\$|\{([A-Za-z_][A-Za-z0-9_]*)\})")

    def before_get(self, parser, section, option, value, defaults):
        def sub(m):
            if m.group(1) == "$":
                return "$"
            name = m.group(2)
            if name not in os.environ:
                raise ConfigError(f"[{section}] {option}: environment variable {name} is not set")
            return os.environ[name]
        return self._VAR.sub(sub, value)


@dataclass(frozen=True)
class BackendSpec:
    role: str
    kind: str = "stub"                  # "stub" or "http"
    stub: Optional[str] = None          # stub kind when kind == "stub"
    options: dict = field(default_factory=dict)
    url: Optional[str] = None
    timeout_ms: int = 30000
    max_retries: int = 3
    max_inflight: int = 4

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    out: str = "runs/default"
    mode: str = "kcomp"
    k: int = 5
    seed: int = 0
    clock: str = "wall"
    corpus_paths: tuple[str, ...] = ()
    store: Optional[str] = None
    questions: Optional[str] = None
    chunk: ChunkPolicy = ChunkPolicy()
    index_kind: str = "exact_flat"
    graph: GraphParams = GraphParams()
    embed_prefix: str = ""
    recognizer_mode: str = "gazetteer"
    min_surface_chars: int = 3
    suffix_strip: bool = True
    input_order: str = PASSAGES_FIRST
    reader_layout: str = ENTITY_FIRST
    summary_header: str = PASSAGE_HEADER
    tokenizer: str = "whitespace"
    compressor_params: DecodeParams = DecodeParams()
    reader_params: DecodeParams = DecodeParams()
    ks: tuple[int, ...] = (1, 5, 10, 20)
    max_workers: int = 4
    backends: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            if self.mode not in MODES:
                raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
            if self.k < 1:
                raise ConfigError("k must be >= 1")
            if self.index_kind not in INDEX_KINDS:
                raise ConfigError(f"index kind must be one of {INDEX_KINDS}")
            if self.input_order not in INPUT_LAYOUTS:
                raise ConfigError(f"input_order must be one of {tuple(INPUT_LAYOUTS)}")
            if self.reader_layout not in (ENTITY_FIRST, PASSAGE_FIRST):
                raise ConfigError("reader layout must be entity_first or passage_first")
            if self.summary_header not in READER_HEADERS:
                raise ConfigError(f"summary_header must be one of {READER_HEADERS}")
            if self.clock not in CLOCKS:
                raise ConfigError(f"clock must be one of {tuple(CLOCKS)}")
            if self.max_workers < 1:
                raise ConfigError("max_workers must be >= 1")
            RecognizerPolicy(mode=self.recognizer_mode, min_surface_chars=self.min_surface_chars)
            for spec in self.backends.values():
                if spec.kind not in ("stub", "http"):
                    raise ConfigError(f"backend {spec.role}: kind must be stub:<kind> or http")
                if spec.kind == "http":
                    BackendConfig(spec.url or "unset", spec.timeout_ms, spec.max_retries, spec.max_inflight)
                else:
                    StubSpec(spec.stub or "")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # paths -----------------------------------------------------------------
    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    @property
    def store_dir(self) -> Path:
        return self.path(self.store) if self.store else self.out_dir / "store"

    @property
    def index_dir(self) -> Path:
        return self.store_dir / "index"

    # derived configs ----------------------------------------------------------
    def recognizer_policy(self) -> RecognizerPolicy:
        return RecognizerPolicy(mode=self.recognizer_mode, min_surface_chars=self.min_surface_chars,
                                suffix_strip=self.suffix_strip)

    def pipeline_config(self, mode: Optional[str] = None) -> PipelineConfig:
        return PipelineConfig(
            mode=mode or self.mode, k=self.k, input_order=self.input_order,
            reader_layout=self.reader_layout, summary_header=self.summary_header,
            compressor_params=self.compressor_params, reader_params=self.reader_params,
            tokenizer=self.tokenizer, clock=self.clock,
        )

    def backend_spec(self, role: str) -> BackendSpec:
        if role in self.backends:
            return self.backends[role]
        stub, opts = DEFAULT_STUBS[role]
        return BackendSpec(role, "stub", stub, dict(opts))

    def to_json(self) -> dict:
        """Verbatim, secret-free, timestamp-free serialization for the run manifest."""
        d = asdict(self)
        d.pop("base_dir")
        d["backends"] = {r: self.backend_spec(r).to_json() for r in ROLES}
        return json.loads(json.dumps(d, sort_keys=True))

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


# -- parsing ------------------------------------------------------------------

def _bool(value: str, where: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {value!r}")


def _int(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {value!r}") from None


def _float(value: str, where: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None


def _list(value: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in re.split(r"[,\n]", value) if x.strip())


def _decode(sec, where: str) -> DecodeParams:
    try:
        return DecodeParams(
            temperature=_float(sec.get("temperature", "0.01"), where),
            top_p=_float(sec.get("top_p", "1.0"), where),
            max_new_tokens=_int(sec.get("max_new_tokens", "512"), where),
            stop_sequences=_list(sec.get("stop", "").replace("\\n", "\n")) if sec.get("stop") else (),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def _backend(role: str, sec, base_dir: Path) -> BackendSpec:
    where = f"[backend.{role}]"
    for key in sec:
        if key in SECRET_KEYS:
            raise ConfigError(f"{where}: secrets are not allowed in config files; "
                              f"set KCOMP_{role.upper()}_TOKEN instead")
    kind = sec.get("kind", "")
    reserved = {"kind", "url", "timeout_ms", "max_retries", "max_inflight"}
    options = {k: v for k, v in sec.items() if k not in reserved}
    if kind.startswith("stub:"):
        if "script" in options:
            p = Path(options["script"])
            options["script"] = str(p if p.is_absolute() else base_dir / p)
        return BackendSpec(role, "stub", kind[5:], options)
    if kind == "http":
        return BackendSpec(
            role, "http", None, options, sec.get("url"),
            _int(sec.get("timeout_ms", "30000"), where),
            _int(sec.get("max_retries", "3"), where),
            _int(sec.get("max_inflight", "4"), where),
        )
    raise ConfigError(f"{where}: kind must be 'stub:<kind>' or 'http', got {kind!r}")


def load_config(path: Optional[os.PathLike | str] = None, text: Optional[str] = None) -> RunConfig:
    """Parse an INI file (or string) into a validated ``RunConfig``."""
    cp = configparser.ConfigParser(interpolation=EnvInterpolation())
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        base_dir = path.parent
        text = path.read_text(encoding="utf-8")
    try:
        cp.read_string(text or "")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    run, corpus, index, rec = sec("run"), sec("corpus"), sec("index"), sec("recognizer")
    reader = sec("reader")
    kw: dict[str, Any] = {"base_dir": str(base_dir)}
    if "out" in run:
        kw["out"] = run["out"]
    for key in ("mode", "clock", "tokenizer"):
        if key in run:
            kw[key] = run[key]
    for key in ("k", "seed", "max_workers"):
        if key in run:
            kw[key] = _int(run[key], f"[run] {key}")
    if "questions" in run:
        kw["questions"] = run["questions"]
    if "ks" in run:
        kw["ks"] = tuple(_int(x, "[run] ks") for x in _list(run["ks"]))
    if "paths" in corpus:
        kw["corpus_paths"] = _list(corpus["paths"])
    if "store" in corpus:
        kw["store"] = corpus["store"]
    if corpus:
        try:
            kw["chunk"] = ChunkPolicy(
                max_tokens=_int(corpus.get("max_tokens", "512"), "[corpus] max_tokens"),
                overlap_tokens=_int(corpus.get("overlap_tokens", "0"), "[corpus] overlap_tokens"),
                sentence_aware=_bool(corpus.get("sentence_aware", "true"), "[corpus] sentence_aware"),
            )
        except ValueError as exc:
            raise ConfigError(f"[corpus] {exc}") from None
    if index:
        kw["index_kind"] = index.get("kind", "exact_flat")
        kw["embed_prefix"] = index.get("prefix", "")
        try:
            kw["graph"] = GraphParams(
                neighbor_degree=_int(index.get("neighbor_degree", "16"), "[index] neighbor_degree"),
                construction_beam=_int(index.get("construction_beam", "200"), "[index] construction_beam"),
                query_beam=_int(index.get("query_beam", "400"), "[index] query_beam"),
                seed=_int(index.get("seed", "0"), "[index] seed"),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[index] {exc}") from None
    if rec:
        kw["recognizer_mode"] = rec.get("mode", "gazetteer")
        kw["min_surface_chars"] = _int(rec.get("min_surface_chars", "3"), "[recognizer] min_surface_chars")
        kw["suffix_strip"] = _bool(rec.get("suffix_strip", "true"), "[recognizer] suffix_strip")
    if cp.has_section("compressor"):
        kw["compressor_params"] = _decode(cp["compressor"], "[compressor]")
        if "input_order" in cp["compressor"]:
            kw["input_order"] = cp["compressor"]["input_order"]
    if reader:
        kw["reader_params"] = _decode(reader, "[reader]")
        kw["reader_layout"] = reader.get("layout", ENTITY_FIRST)
        kw["summary_header"] = reader.get("summary_header", PASSAGE_HEADER)
    backends = {}
    for name in cp.sections():
        if name.startswith("backend."):
            role = name[len("backend."):]
            if role not in ROLES:
                raise ConfigError(f"unknown backend role {role!r}; expected one of {ROLES}")
            backends[role] = _backend(role, cp[name], base_dir)
    kw["backends"] = backends
    known = {"run", "corpus", "index", "recognizer", "compressor", "reader"}
    for name in cp.sections():
        if name not in known and not name.startswith("backend."):
            raise ConfigError(f"unknown config section [{name}]")
    return RunConfig(**kw)


# -- backend construction ------------------------------------------------------

def _stub(spec: BackendSpec, seed: int):
    opts = dict(spec.options)
    script = None
    if "script" in opts:
        try:
            script = json.loads(Path(opts.pop("script")).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"[backend.{spec.role}] script: {exc}") from None
    if "surfaces" in opts:
        opts["surfaces"] = _list(opts["surfaces"])
    stub_seed = int(opts.pop("seed", seed))
    try:
        return make_stub(StubSpec(spec.stub, stub_seed, script, opts))
    except ValueError as exc:
        raise ConfigError(f"[backend.{spec.role}] {exc}") from None


class BackendRegistry:
    """Builds each configured backend once, on first use.

    Nothing is constructed until a stage asks for it, so a dry run never
    touches a backend at all.
    """

    def __init__(self, config: RunConfig, overrides: Optional[dict] = None):
        self.config = config
        self.instances: dict[str, Any] = dict(overrides or {})

    def get(self, role: str):
        if role not in self.instances:
            spec = self.config.backend_spec(role)
            if spec.kind == "stub":
                self.instances[role] = _stub(spec, self.config.seed)
            else:
                cfg = BackendConfig.from_env(
                    role, base_url=spec.url, timeout_ms=spec.timeout_ms,
                    max_retries=spec.max_retries, max_inflight=spec.max_inflight,
                )
                self.instances[role] = ROLE_CLIENTS[role](cfg)
        return self.instances[role]


def file_digest(path: os.PathLike | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()
