"""Empirical coverage of conformal retrieval on held-out questions."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .calibration import (
    DEFAULT_MAX_RANK,
    DEFAULT_MODE,
    RETRIEVE_ALL,
    CalibrationQuestion,
    CalibrationRecord,
    CalibrationReport,
    RelevanceJudge,
    check_alpha,
    check_mode,
    label_questions,
    report_from_labels,
)
from .embedding import EmbeddingProvider, EmbeddingVector
from .errors import ConfigError, DataError
from .retrieval import DEFAULT_COMPARISON, check_comparison, conformal_retrieve, top_k_retrieve
from .vectorstore import VectorStore, atomic_write_text

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("alpha", "threshold", "coverage", "mean_set_size", "median_set_size", "max_set_size")


@dataclass
class CoverageResult:
    alpha: float
    mode: str
    comparison: str
    threshold: object
    n_test: int
    n_covered: int
    empirical_coverage: float
    mean_set_size: float
    median_set_size: float
    max_set_size: int
    per_question: list[dict] = field(default_factory=list)
    n_excluded: int = 0
    excluded_question_ids: list[str] = field(default_factory=list)
    n_calibration_labeled: int = 0
    baseline_k: int | None = None
    baseline_coverage: float | None = None

    @property
    def target(self) -> float:
        return 1.0 - self.alpha

    def csv_row(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold": RETRIEVE_ALL.value if self.threshold is RETRIEVE_ALL else self.threshold,
            "coverage": self.empirical_coverage,
            "mean_set_size": self.mean_set_size,
            "median_set_size": self.median_set_size,
            "max_set_size": self.max_set_size,
        }


def coverage_tolerance(alpha: float, n_test: int) -> float:
    """Three binomial standard deviations around the target coverage."""
    return 3.0 * math.sqrt(alpha * (1.0 - alpha) / n_test)


@dataclass
class LabeledSplits:
    """Both splits labeled once; reused across every alpha of a sweep."""

    calibration: list[CalibrationQuestion]
    calibration_labels: list[CalibrationRecord | None]
    test: list[CalibrationQuestion]
    test_labels: list[CalibrationRecord | None]
    test_vectors: list[EmbeddingVector]
    judge_id: str
    max_rank: int | None
    metric: str


def check_splits(calibration: Sequence[CalibrationQuestion], test: Sequence[CalibrationQuestion]) -> None:
    if not calibration:
        raise DataError("calibration split is empty")
    if not test:
        raise DataError("test split is empty")
    overlap = sorted({q.question_id for q in calibration} & {q.question_id for q in test})
    if overlap:
        raise DataError(f"calibration and test splits share question_id(s): {overlap[:10]}")


def label_splits(
    store: VectorStore,
    calibration: Sequence[CalibrationQuestion],
    test: Sequence[CalibrationQuestion],
    judge: RelevanceJudge,
    embedder: EmbeddingProvider,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    metric: str | None = None,
    workers: int = 1,
) -> LabeledSplits:
    check_splits(calibration, test)
    metric = metric or store.metric_default
    calib_labels = label_questions(calibration, store, judge, embedder, max_rank, metric=metric, workers=workers)
    test_vectors = embedder.embed_batch([q.question for q in test])
    test_labels = label_questions(
        test, store, judge, embedder, max_rank, metric=metric, workers=workers, vectors=test_vectors
    )
    return LabeledSplits(
        list(calibration), calib_labels, list(test), test_labels, test_vectors, judge.judge_id, max_rank, metric
    )


def coverage_at(
    store: VectorStore,
    splits: LabeledSplits,
    alpha: float,
    mode: str = DEFAULT_MODE,
    comparison: str = DEFAULT_COMPARISON,
    baseline_k: int | None = None,
) -> tuple[CoverageResult, CalibrationReport]:
    """Calibrate on the calibration labels, then score the test split."""
    alpha = check_alpha(alpha)
    check_mode(mode)
    check_comparison(comparison)
    report = report_from_labels(
        store,
        splits.calibration,
        splits.calibration_labels,
        splits.judge_id,
        alpha,
        mode,
        splits.max_rank,
        metric=splits.metric,
        created_at="",
    )

    per_question = []
    excluded = []
    answer_ids: list[str] = []
    vectors: list[EmbeddingVector] = []
    for q, label, vec in zip(splits.test, splits.test_labels, splits.test_vectors):
        if label is None:
            excluded.append(q.question_id)
            continue
        ctx = conformal_retrieve(q.question, store, report, comparison=comparison, question_vector=vec)
        retrieved = ctx.chunk_ids
        covered = label.answer_chunk_id in retrieved
        per_question.append(
            {
                "question_id": q.question_id,
                "covered": covered,
                "set_size": len(retrieved),
                "answer_chunk_id": label.answer_chunk_id,
                "answer_score": label.score,
                "answer_rank_if_missed": None if covered else label.answer_rank,
            }
        )
        answer_ids.append(label.answer_chunk_id)
        vectors.append(vec)
    if excluded:
        logger.warning("%d test question(s) had no answer chunk and were excluded: %s", len(excluded), excluded)
    if not per_question:
        raise DataError("no labelable test questions")

    sizes = [p["set_size"] for p in per_question]
    n_covered = sum(p["covered"] for p in per_question)
    result = CoverageResult(
        alpha=alpha,
        mode=mode,
        comparison=comparison,
        threshold=report.threshold,
        n_test=len(per_question),
        n_covered=n_covered,
        empirical_coverage=n_covered / len(per_question),
        mean_set_size=statistics.fmean(sizes),
        median_set_size=float(statistics.median(sizes)),
        max_set_size=max(sizes),
        per_question=per_question,
        n_excluded=len(excluded),
        excluded_question_ids=excluded,
        n_calibration_labeled=report.n_labeled,
    )

    # Same labels for both arms so the comparison is like for like.
    k = baseline_k if baseline_k is not None else max(1, round(result.mean_set_size))
    hits = 0
    for answer_id, vec in zip(answer_ids, vectors):
        top = top_k_retrieve("", store, k, question_vector=vec, metric=splits.metric)
        hits += answer_id in top.chunk_ids
    result.baseline_k = k
    result.baseline_coverage = hits / len(per_question)
    return result, report


def evaluate_coverage(
    store: VectorStore,
    calibration_questions: Sequence[CalibrationQuestion],
    test_questions: Sequence[CalibrationQuestion],
    judge: RelevanceJudge,
    embedder: EmbeddingProvider,
    alpha: float,
    mode: str = DEFAULT_MODE,
    comparison: str = DEFAULT_COMPARISON,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    baseline_k: int | None = None,
    workers: int = 1,
) -> CoverageResult:
    """Calibrate on one split and measure answer-chunk coverage on the other.

    A test question counts as covered when the chunk its first-accept label
    points at is among the conformally retrieved chunks. Test questions
    without any answer chunk are excluded and reported, not counted as misses.
    """
    check_alpha(alpha)
    check_mode(mode)
    check_comparison(comparison)
    splits = label_splits(
        store, calibration_questions, test_questions, judge, embedder, max_rank, workers=workers
    )
    result, _ = coverage_at(store, splits, alpha, mode, comparison, baseline_k)
    return result


def sweep_alpha(
    store: VectorStore,
    calibration_questions: Sequence[CalibrationQuestion],
    test_questions: Sequence[CalibrationQuestion],
    judge: RelevanceJudge,
    embedder: EmbeddingProvider,
    alphas: Sequence[float],
    mode: str = DEFAULT_MODE,
    comparison: str = DEFAULT_COMPARISON,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    baseline_k: int | None = None,
    workers: int = 1,
) -> list[CoverageResult]:
    """One :class:`CoverageResult` per alpha, in the order given."""
    if not alphas:
        raise ConfigError("alpha sweep needs at least one alpha")
    alphas = [check_alpha(a) for a in alphas]
    check_mode(mode)
    check_comparison(comparison)
    splits = label_splits(
        store, calibration_questions, test_questions, judge, embedder, max_rank, workers=workers
    )
    results = [coverage_at(store, splits, a, mode, comparison, baseline_k)[0] for a in alphas]
    by_alpha = sorted(results, key=lambda r: r.alpha)
    for lo, hi in zip(by_alpha, by_alpha[1:]):
        if hi.mean_set_size > lo.mean_set_size:
            logger.warning(
                "mean set size rose from %.3f (alpha=%g) to %.3f (alpha=%g)",
                lo.mean_set_size,
                lo.alpha,
                hi.mean_set_size,
                hi.alpha,
            )
    return results


def sweep_csv(results: Sequence[CoverageResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def write_sweep_csv(results: Sequence[CoverageResult], path: str | Path) -> None:
    atomic_write_text(path, sweep_csv(results))


def write_detail_jsonl(results: Sequence[CoverageResult], path: str | Path) -> None:
    lines = []
    for r in results:
        for p in r.per_question:
            lines.append(json.dumps({"alpha": r.alpha, "mode": r.mode, **p}, ensure_ascii=False))
    atomic_write_text(path, "".join(line + "\n" for line in lines))
