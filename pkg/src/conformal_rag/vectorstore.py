"""Exact-scan vector store with a versioned JSON Lines file format."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .corpus import Chunk
from .embedding import EmbeddingProvider, EmbeddingVector, _seq_dot, check_metric
from .errors import ContractError, DataError, ProviderError

logger = logging.getLogger(__name__)

STORE_FORMAT = "conformal-rag-store"
STORE_VERSION = 1

# Columns scored per block in ranked queries; bounds the temporary product array.
_SCAN_BLOCK = 65536


@dataclass(frozen=True)
class EmbeddedChunk:
    chunk: Chunk
    vector: EmbeddingVector


@dataclass(frozen=True)
class RankedHit:
    chunk_id: str
    score: float
    rank: int


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class VectorStore:
    """Immutable collection of embedded chunks answering exact ranked queries.

    Vectors are held column-major (dim x n) so every score is accumulated
    left to right over the vector components, independent of the entry's
    position. Scores therefore match :func:`embedding.similarity` bit for bit
    and do not change when entries are inserted in a different order.
    """

    def __init__(
        self,
        chunks: Sequence[Chunk],
        vectors: np.ndarray,
        embedder_id: str,
        *,
        metric_default: str = "cosine",
        chunking: dict | None = None,
        created_at: str | None = None,
    ):
        if not chunks:
            raise DataError("empty store: no chunks to index")
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(chunks):
            raise ContractError(f"expected {len(chunks)} vectors, got array of shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ContractError("store vectors contain NaN or Inf")
        seen: set[str] = set()
        for c in chunks:
            if c.chunk_id in seen:
                raise DataError(f"duplicate chunk_id {c.chunk_id!r}")
            seen.add(c.chunk_id)

        self.chunks: tuple[Chunk, ...] = tuple(chunks)
        self.embedder_id = embedder_id
        self.dim = int(vectors.shape[1])
        self.metric_default = check_metric(metric_default)
        self.chunking = dict(chunking or {})
        self.created_at = created_at or utc_now()

        self._vectors = vectors.copy()
        self._vectors.setflags(write=False)
        self._columns = np.ascontiguousarray(vectors.T)
        self._columns.setflags(write=False)
        self._norms = np.sqrt(np.add.reduce(self._columns * self._columns, axis=0))
        # Position of each entry in ascending chunk_id order; the tie-break key.
        id_order = sorted(range(len(self.chunks)), key=lambda i: self.chunks[i].chunk_id)
        self._id_rank = np.empty(len(self.chunks), dtype=np.int64)
        self._id_rank[id_order] = np.arange(len(self.chunks))
        self._index = {c.chunk_id: i for i, c in enumerate(self.chunks)}

    def __len__(self) -> int:
        return len(self.chunks)

    def __iter__(self) -> Iterator[EmbeddedChunk]:
        for i, c in enumerate(self.chunks):
            yield EmbeddedChunk(c, EmbeddingVector(self._vectors[i], self.embedder_id))

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._index

    def chunk(self, chunk_id: str) -> Chunk:
        return self.chunks[self._index[chunk_id]]

    def vector(self, chunk_id: str) -> EmbeddingVector:
        return EmbeddingVector(self._vectors[self._index[chunk_id]], self.embedder_id)

    def header(self) -> dict:
        return {
            "format": STORE_FORMAT,
            "version": STORE_VERSION,
            "embedder_id": self.embedder_id,
            "dim": self.dim,
            "metric_default": self.metric_default,
            "chunking": self.chunking,
            "n_chunks": len(self.chunks),
            "created_at": self.created_at,
        }

    def fingerprint(self) -> str:
        """sha256 over the header, excluding the creation timestamp."""
        header = {k: v for k, v in self.header().items() if k != "created_at"}
        return hashlib.sha256(json.dumps(header, sort_keys=True).encode("utf-8")).hexdigest()

    def _check_query(self, q: EmbeddingVector) -> None:
        if q.embedder_id != self.embedder_id:
            raise ContractError(
                f"embedder mismatch: query {q.embedder_id!r} vs store {self.embedder_id!r}"
            )
        if q.dim != self.dim:
            raise ContractError(f"dimension mismatch: query {q.dim} vs store {self.dim}")

    def scores(self, question_vector: EmbeddingVector, metric: str | None = None) -> np.ndarray:
        """Similarity of the query against every entry, in insertion order."""
        metric = check_metric(metric or self.metric_default)
        self._check_query(question_vector)
        q = question_vector.values
        n = len(self.chunks)
        dots = np.empty(n, dtype=np.float64)
        for lo in range(0, n, _SCAN_BLOCK):
            hi = min(n, lo + _SCAN_BLOCK)
            dots[lo:hi] = np.add.reduce(self._columns[:, lo:hi] * q[:, None], axis=0)
        if metric == "dot":
            return dots
        ql = q.tolist()
        qn = math.sqrt(_seq_dot(ql, ql))
        out = np.zeros(n, dtype=np.float64)
        if qn == 0.0:
            return out
        nz = self._norms != 0.0
        out[nz] = dots[nz] / (self._norms[nz] * qn)
        return out

    def rank_order(self, scores: np.ndarray, subset: np.ndarray | None = None) -> np.ndarray:
        """Entry indices by descending score, ties by ascending chunk_id."""
        if subset is None:
            return np.lexsort((self._id_rank, -scores))
        return subset[np.lexsort((self._id_rank[subset], -scores[subset]))]

    def hits_for(self, scores: np.ndarray, order: np.ndarray) -> list[RankedHit]:
        return [
            RankedHit(self.chunks[i].chunk_id, float(scores[i]), rank)
            for rank, i in enumerate(order.tolist(), start=1)
        ]

    def ranked_query(
        self, question_vector: EmbeddingVector, limit: int | None = None, metric: str | None = None
    ) -> list[RankedHit]:
        """Exact ranking by descending score, ties by ascending chunk_id.

        ``limit=None`` ranks every entry.
        """
        if limit is not None and limit < 1:
            raise ValueError(f"limit must be a positive integer or None, got {limit}")
        scores = self.scores(question_vector, metric)
        order = self.rank_order(scores)
        if limit is not None:
            order = order[:limit]
        return self.hits_for(scores, order)

    def iter_ranked(
        self, question_vector: EmbeddingVector, limit: int | None = None, metric: str | None = None
    ) -> Iterator[RankedHit]:
        """Lazy form of :meth:`ranked_query` for callers that stop early."""
        if limit is not None and limit < 1:
            raise ValueError(f"limit must be a positive integer or None, got {limit}")
        scores = self.scores(question_vector, metric)
        order = self.rank_order(scores)
        if limit is not None:
            order = order[:limit]
        for rank, i in enumerate(order.tolist(), start=1):
            yield RankedHit(self.chunks[i].chunk_id, float(scores[i]), rank)


def build_store(
    chunks: Sequence[Chunk],
    provider: EmbeddingProvider,
    *,
    metric: str = "cosine",
    chunking: dict | None = None,
    created_at: str | None = None,
) -> VectorStore:
    if not chunks:
        raise DataError("empty store: no chunks to index")
    seen: set[str] = set()
    for c in chunks:
        if c.chunk_id in seen:
            raise DataError(f"duplicate chunk_id {c.chunk_id!r}")
        seen.add(c.chunk_id)
    try:
        vectors = provider.embed_batch([c.text for c in chunks])
    except ProviderError as exc:
        raise ProviderError(f"embedding failed for {len(chunks)} chunks: {exc}", exc.attempts) from exc
    for v in vectors:
        if v.embedder_id != provider.embedder_id or v.dim != provider.dim:
            raise ProviderError(
                f"provider contract violation: expected {provider.embedder_id!r} dim {provider.dim}, "
                f"got {v.embedder_id!r} dim {v.dim}"
            )
    matrix = np.vstack([v.values for v in vectors])
    return VectorStore(
        chunks, matrix, provider.embedder_id, metric_default=metric, chunking=chunking, created_at=created_at
    )


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def save_store(store: VectorStore, path: str | Path) -> None:
    lines = [_dumps(store.header())]
    for i, c in enumerate(store.chunks):
        lines.append(
            _dumps(
                {
                    "chunk_id": c.chunk_id,
                    "doc_id": c.doc_id,
                    "ordinal": c.ordinal,
                    "text": c.text,
                    "token_span": list(c.token_span),
                    # repr-based float serialization round-trips exactly.
                    "vector": store._vectors[i].tolist(),
                }
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_store(path: str | Path, expected_embedder_id: str | None = None) -> VectorStore:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"store file not found: {path}")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"corrupt store {path}: not UTF-8") from exc
    if not text.endswith("\n"):
        raise DataError(f"corrupt store {path}: truncated (missing final newline)")
    lines = text[:-1].split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt store {path}: unreadable header") from exc
    if not isinstance(header, dict) or header.get("format") != STORE_FORMAT:
        raise DataError(
            f"corrupt store {path}: format {header.get('format') if isinstance(header, dict) else None!r}, "
            f"expected {STORE_FORMAT!r}"
        )
    if header.get("version") != STORE_VERSION:
        raise DataError(f"store version mismatch: file has {header.get('version')!r}, reader supports {STORE_VERSION}")
    if expected_embedder_id is not None and header.get("embedder_id") != expected_embedder_id:
        logger.warning(
            "store embedder_id %r differs from configured %r; queries need vectors from %r",
            header.get("embedder_id"),
            expected_embedder_id,
            header.get("embedder_id"),
        )
    body = lines[1:]
    if len(body) != header.get("n_chunks"):
        raise DataError(f"corrupt store {path}: header declares {header.get('n_chunks')} chunks, found {len(body)}")
    chunks = []
    vectors = []
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
            chunk = Chunk(
                chunk_id=rec["chunk_id"],
                doc_id=rec["doc_id"],
                ordinal=int(rec["ordinal"]),
                text=rec["text"],
                token_span=tuple(rec["token_span"]),
            )
            vec = [float(x) for x in rec["vector"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt store {path}: line {lineno}: {exc}") from exc
        if len(vec) != header["dim"]:
            raise DataError(f"corrupt store {path}: line {lineno}: vector length {len(vec)} != dim {header['dim']}")
        chunks.append(chunk)
        vectors.append(vec)
    return VectorStore(
        chunks,
        np.array(vectors, dtype=np.float64),
        header["embedder_id"],
        metric_default=header.get("metric_default", "cosine"),
        chunking=header.get("chunking"),
        created_at=header.get("created_at"),
    )
