"""Embedding providers and vector similarity."""
from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ProviderError
from .http import DEFAULT_MAX_IN_FLIGHT, JsonClient

METRICS = ("cosine", "dot")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_SPLIT_RE = re.compile(r"[\W_]+")


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    embedder_id: str

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ContractError(f"embedding must be a non-empty 1-D vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractError(f"embedding from {self.embedder_id} contains NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.embedder_id == other.embedder_id and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.embedder_id, self.values.tobytes()))


class EmbeddingProvider(Protocol):
    embedder_id: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tokenize_for_embedding(text: str) -> list[str]:
    return [t for t in _SPLIT_RE.split(text.lower()) if t]


def reference_embed(text: str, dim: int) -> EmbeddingVector:
    """Hashed bag-of-words embedding, L2-normalized.

    Lowercases, splits on runs of non-alphanumeric characters, and adds 1.0 to
    bucket ``fnv1a_64(utf8(token)) % dim`` for every token. Text with no
    tokens maps to the zero vector.
    """
    if dim < 2:
        raise ConfigError(f"embedding.dim must be >= 2, got {dim}")
    buckets = [0.0] * dim
    for token in tokenize_for_embedding(text):
        buckets[fnv1a_64(token.encode("utf-8")) % dim] += 1.0
    norm = math.sqrt(sum(b * b for b in buckets))
    if norm > 0.0:
        buckets = [b / norm for b in buckets]
    return EmbeddingVector(np.array(buckets), reference_embedder_id(dim))


def reference_embedder_id(dim: int) -> str:
    return f"reference-fnv1a64-bow:{dim}"


class ReferenceEmbedder:
    """Deterministic offline embedder; see :func:`reference_embed`."""

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ConfigError(f"embedding.dim must be >= 2, got {dim}")
        self.dim = dim
        self.embedder_id = reference_embedder_id(dim)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [reference_embed(t, self.dim) for t in texts]


class RemoteEmbedder:
    """Client for an HTTP embedding endpoint.

    Request ``{"model", "input": [...]}``, response ``{"data": [{"index",
    "embedding"}, ...]}``. Batches run concurrently up to the client's
    in-flight limit; output order always matches input order.
    """

    def __init__(
        self,
        client: JsonClient,
        model: str,
        dim: int,
        batch_size: int = 64,
    ):
        if not model:
            raise ConfigError("embedding.model is not configured")
        if dim < 1:
            raise ConfigError(f"embedding.dim must be >= 1, got {dim}")
        if batch_size < 1:
            raise ConfigError(f"embedding.batch must be >= 1, got {batch_size}")
        self.client = client
        self.model = model
        self.dim = dim
        self.batch_size = batch_size
        self.embedder_id = f"remote:{model}:{dim}"

    def _embed_one_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        body = self.client.post({"model": self.model, "input": list(texts)})
        try:
            data = body["data"]
            by_index = {int(item["index"]): item["embedding"] for item in data}
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embedding response: {exc!r}") from exc
        if sorted(by_index) != list(range(len(texts))):
            raise ProviderError(
                f"embedding response indices {sorted(by_index)} do not cover the {len(texts)} inputs"
            )
        out = []
        for i in range(len(texts)):
            values = by_index[i]
            if len(values) != self.dim:
                raise ProviderError(
                    f"provider contract violation: {self.embedder_id} declared dim {self.dim}, "
                    f"got a vector of length {len(values)}"
                )
            out.append(EmbeddingVector(np.asarray(values, dtype=np.float64), self.embedder_id))
        return out

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        batches = [texts[i : i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        if len(batches) <= 1:
            return [v for b in batches for v in self._embed_one_batch(b)]
        with ThreadPoolExecutor(max_workers=min(self.client.max_in_flight, len(batches))) as pool:
            results = pool.map(self._embed_one_batch, batches)
            return [v for batch in results for v in batch]


def embed_text(text: str, provider: EmbeddingProvider) -> EmbeddingVector:
    (vec,) = provider.embed_batch([text])
    if vec.dim != provider.dim:
        raise ProviderError(
            f"provider contract violation: {provider.embedder_id} declared dim {provider.dim}, got {vec.dim}"
        )
    return vec


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ConfigError(f"similarity.metric must be one of {METRICS}, got {metric!r}")
    return metric


def _seq_dot(a: Sequence[float], b: Sequence[float]) -> float:
    # Left-to-right accumulation; VectorStore reproduces this order bit-exactly.
    total = 0.0
    for x, y in zip(a, b):
        total += x * y
    return total


def similarity(a: EmbeddingVector, b: EmbeddingVector, metric: str = "cosine") -> float:
    """Cosine or dot-product similarity; cosine with a zero vector is 0.0."""
    check_metric(metric)
    if a.embedder_id != b.embedder_id:
        raise ContractError(f"embedder mismatch: {a.embedder_id!r} vs {b.embedder_id!r}")
    if a.dim != b.dim:
        raise ContractError(f"dimension mismatch: {a.dim} ({a.embedder_id!r}) vs {b.dim} ({b.embedder_id!r})")
    av, bv = a.values.tolist(), b.values.tolist()
    dot = _seq_dot(av, bv)
    if metric == "dot":
        return dot
    na, nb = math.sqrt(_seq_dot(av, av)), math.sqrt(_seq_dot(bv, bv))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def make_embedder(
    provider: str,
    *,
    dim: int,
    endpoint: str | None = None,
    model: str | None = None,
    batch: int = 64,
    api_key: str | None = None,
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
) -> EmbeddingProvider:
    if provider == "reference":
        return ReferenceEmbedder(dim)
    if provider == "remote":
        client = JsonClient(endpoint or "", api_key, max_in_flight=max_in_flight)
        return RemoteEmbedder(client, model or "", dim, batch)
    raise ConfigError(f"embedding.provider must be 'reference' or 'remote', got {provider!r}")
