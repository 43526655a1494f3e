"""Wire-protocol clients and offline stubs for every external model service."""

from .base import (
    BackendConfig,
    BackendError,
    ClientRequestError,
    EmbeddingConfigError,
    GenerateRequest,
    GenerateResponse,
    NERSpan,
    ProtocolError,
    TransportError,
    apply_stop,
)
from .http import EmbedClient, GenerateClient, HTTPBackend, NERClient, RerankClient
from .stubs import (
    EchoNER,
    HashEmbedder,
    LexicalReranker,
    ScriptedGenerator,
    StubSpec,
    TableOracle,
    fingerprint,
    make_stub,
    stub_hash_embedder,
    table_oracle,
)

__all__ = [
    "BackendConfig", "BackendError", "ClientRequestError", "EmbeddingConfigError",
    "GenerateRequest", "GenerateResponse", "NERSpan", "ProtocolError", "TransportError",
    "apply_stop", "EmbedClient", "GenerateClient", "HTTPBackend", "NERClient",
    "RerankClient", "EchoNER", "HashEmbedder", "LexicalReranker", "ScriptedGenerator",
    "StubSpec", "TableOracle", "fingerprint", "make_stub", "stub_hash_embedder", "table_oracle",
]
