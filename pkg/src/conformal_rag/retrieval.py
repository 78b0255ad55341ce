"""Inference-time retrieval: every chunk that clears the calibrated cutoff."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .calibration import RETRIEVE_ALL, CalibrationReport
from .embedding import EmbeddingProvider, EmbeddingVector
from .errors import ConfigError, ContractError
from .vectorstore import RankedHit, VectorStore

logger = logging.getLogger(__name__)

COMPARISONS = ("geq", "strict-gt")
DEFAULT_COMPARISON = "geq"


@dataclass
class RetrievedContext:
    question: str
    hits: list[RankedHit]
    threshold_used: object = None
    comparison: str | None = None
    truncated: bool = False
    truncation_reason: str | None = None
    alpha: float | None = None
    n_qualifying: int = 0

    @property
    def chunk_ids(self) -> list[str]:
        return [h.chunk_id for h in self.hits]

    def mark_truncated(self, reason: str) -> None:
        self.truncated = True
        if not self.truncation_reason:
            self.truncation_reason = reason
        elif reason not in self.truncation_reason.split(","):
            self.truncation_reason += "," + reason

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "hits": [{"chunk_id": h.chunk_id, "score": h.score, "rank": h.rank} for h in self.hits],
            "threshold_used": (
                RETRIEVE_ALL.value if self.threshold_used is RETRIEVE_ALL else self.threshold_used
            ),
            "comparison": self.comparison,
            "truncated": self.truncated,
            "truncation_reason": self.truncation_reason,
            "alpha": self.alpha,
            "n_qualifying": self.n_qualifying,
        }


def check_comparison(comparison: str) -> str:
    if comparison not in COMPARISONS:
        raise ConfigError(f"retrieval.comparison must be one of {COMPARISONS}, got {comparison!r}")
    return comparison


def _question_vector(question: str, embedder, question_vector) -> EmbeddingVector:
    if question_vector is not None:
        return question_vector
    if embedder is None:
        raise ValueError("need an embedder or a precomputed question_vector")
    (vec,) = embedder.embed_batch([question])
    return vec


def conformal_retrieve(
    question: str,
    store: VectorStore,
    report: CalibrationReport,
    embedder: EmbeddingProvider | None = None,
    budget: int | None = None,
    comparison: str = DEFAULT_COMPARISON,
    *,
    question_vector: EmbeddingVector | None = None,
) -> RetrievedContext:
    """Return all chunks whose score passes the report's threshold.

    ``budget=None`` is unlimited. When more chunks qualify than the budget
    allows, the best ``budget`` are kept and the context is flagged as
    truncated: the coverage guarantee no longer holds for that query.
    An empty result is returned as-is; abstaining is the caller's job.
    """
    check_comparison(comparison)
    if budget is not None and budget < 1:
        raise ConfigError(f"retrieval.max_chunks must be >= 1, got {budget}")
    if report.embedder_id != store.embedder_id:
        raise ContractError(
            f"embedder mismatch: calibration report {report.embedder_id!r} vs store {store.embedder_id!r}"
        )
    report.verify()
    if report.store_fingerprint != store.fingerprint():
        logger.warning("calibration report was computed against a different store (fingerprint mismatch)")

    vec = _question_vector(question, embedder, question_vector)
    threshold = report.threshold
    scores = store.scores(vec, report.metric)
    if threshold is RETRIEVE_ALL:
        order = store.rank_order(scores)
    else:
        mask = scores >= threshold if comparison == "geq" else scores > threshold
        order = store.rank_order(scores, np.flatnonzero(mask))
    qualifying = store.hits_for(scores, order)
    ctx = RetrievedContext(
        question=question,
        hits=qualifying,
        threshold_used=threshold,
        comparison=comparison,
        alpha=report.alpha,
        n_qualifying=len(qualifying),
    )
    if budget is not None and len(qualifying) > budget:
        ctx.hits = qualifying[:budget]
        ctx.mark_truncated("budget")
        logger.warning(
            "%d chunks cleared the threshold but max_chunks=%d; the %.0f%% coverage guarantee "
            "does not hold for this query",
            len(qualifying),
            budget,
            100 * (1 - report.alpha),
        )
    return ctx


def top_k_retrieve(
    question: str,
    store: VectorStore,
    k: int,
    embedder: EmbeddingProvider | None = None,
    *,
    question_vector: EmbeddingVector | None = None,
    metric: str | None = None,
) -> RetrievedContext:
    """Conventional fixed-k retrieval, kept as a baseline."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    vec = _question_vector(question, embedder, question_vector)
    hits = store.ranked_query(vec, limit=min(k, len(store)), metric=metric)
    return RetrievedContext(question=question, hits=hits, n_qualifying=len(hits))

