"""Calibration: question sets, first-answer labeling, and the conformal cutoff."""
from __future__ import annotations

import enum
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .embedding import EmbeddingProvider, EmbeddingVector
from .errors import ConfigError, ContractError, DataError, ProviderError
from .llm import ChatProvider, load_template, render
from .vectorstore import VectorStore, atomic_write_text, utc_now

logger = logging.getLogger(__name__)

QUANTILE_MODES = ("finite-sample", "paper-percentile")
DEFAULT_MODE = "finite-sample"
DEFAULT_MAX_RANK = 50
DROP_RATE_WARNING = 0.2
RNG_ALGORITHM = "numpy.PCG64"
REPORT_FORMAT = "conformal-rag-calibration"


class Sentinel(enum.Enum):
    RETRIEVE_ALL = "RETRIEVE_ALL"

    def __repr__(self) -> str:
        return self.value


# Threshold that sits below every possible score: retrieve the whole store.
RETRIEVE_ALL = Sentinel.RETRIEVE_ALL


def threshold_key(threshold) -> float:
    """Total order over thresholds, with RETRIEVE_ALL below every score."""
    return -math.inf if threshold is RETRIEVE_ALL else float(threshold)


@dataclass(frozen=True)
class CalibrationQuestion:
    question_id: str
    question: str
    reference_answer: str = ""
    source_doc_id: str | None = None
    origin: str = "imported"

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise DataError(f"calibration question {self.question_id!r} has empty text")
        if self.origin not in ("generated", "imported"):
            raise ValueError(f"origin must be 'generated' or 'imported', got {self.origin!r}")


@dataclass(frozen=True)
class CalibrationRecord:
    question_id: str
    answer_chunk_id: str
    answer_rank: int
    score: float
    judge_id: str


def check_alpha(alpha: float) -> float:
    try:
        alpha = float(alpha)
    except (TypeError, ValueError):
        raise ConfigError(f"calibration.alpha must be a number in (0, 1), got {alpha!r}") from None
    if not (0.0 < alpha < 1.0):
        raise ConfigError(f"calibration.alpha must lie strictly between 0 and 1, got {alpha}")
    return alpha


def check_mode(mode: str) -> str:
    if mode not in QUANTILE_MODES:
        raise ConfigError(f"calibration.mode must be one of {QUANTILE_MODES}, got {mode!r}")
    return mode


def threshold_rank(n: int, alpha: float, mode: str) -> int:
    """1-based descending rank of the order statistic used as the cutoff.

    ``alpha`` is taken at its shortest decimal value (0.1 means exactly 1/10),
    so ``ceil`` is not thrown off by binary rounding in ``1 - alpha``.
    """
    a = Fraction(repr(check_alpha(alpha)))
    m = n if check_mode(mode) == "paper-percentile" else n + 1
    return math.ceil((1 - a) * m)


def compute_threshold(scores: Sequence[float], alpha: float, mode: str = DEFAULT_MODE):
    """Similarity cutoff such that at least 1 - alpha of ``scores`` are >= it.

    Sort descending and take the k-th value: k = ceil((1 - alpha) n) for
    ``paper-percentile``, k = ceil((1 - alpha)(n + 1)) for ``finite-sample``.
    When k exceeds n no score qualifies and RETRIEVE_ALL is returned.
    """
    if len(scores) == 0:
        raise DataError("no labeled calibration records")
    k = threshold_rank(len(scores), alpha, mode)
    ordered = sorted((float(s) for s in scores), reverse=True)
    if k > len(ordered):
        return RETRIEVE_ALL
    return ordered[k - 1]


# --- judges -----------------------------------------------------------------


class RelevanceJudge(Protocol):
    judge_id: str

    def accept(self, question: str, reference_answer: str, chunk_text: str) -> bool: ...


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


class SubstringJudge:
    """Accepts a chunk that contains the reference answer (case and whitespace folded).

    An empty reference answer is never accepted; use an LLM judge for
    question files without answers.
    """

    judge_id = "substring-v1"

    def accept(self, question: str, reference_answer: str, chunk_text: str) -> bool:
        needle = _normalize(reference_answer)
        return bool(needle) and needle in _normalize(chunk_text)


_YES_NO_RE = re.compile(r"^\W*(yes|no)\W*$")


class LLMJudge:
    """Asks a chat model for a strict yes/no; anything else is a no after one reprompt."""

    def __init__(self, llm: ChatProvider, template: str | None = None):
        self.llm = llm
        self.template = template or load_template(None, "judge.txt")
        self.judge_id = f"llm:{llm.model_id}"

    @staticmethod
    def _parse(reply: str) -> str | None:
        m = _YES_NO_RE.match(reply.strip().lower())
        return m.group(1) if m else None

    def accept(self, question: str, reference_answer: str, chunk_text: str) -> bool:
        prompt = render(self.template, question=question, answer=reference_answer, chunk=chunk_text)
        messages = [{"role": "user", "content": prompt}]
        verdict = self._parse(self.llm.complete(messages))
        if verdict is None:
            messages.append({"role": "user", "content": "Answer with exactly one word: yes or no."})
            verdict = self._parse(self.llm.complete(messages))
        return verdict == "yes"


def make_judge(kind: str, llm: ChatProvider | None = None, template: str | None = None) -> RelevanceJudge:
    if kind == "substring":
        return SubstringJudge()
    if kind == "llm":
        if llm is None:
            raise ConfigError("calibration.judge = 'llm' requires llm.endpoint and llm.model")
        return LLMJudge(llm, template)
    raise ConfigError(f"calibration.judge must be 'substring' or 'llm', got {kind!r}")


# --- question sets -----------------------------------------------------------


class QuestionGenerator(Protocol):
    generator_id: str

    def generate(self, chunk_text: str) -> Mapping[str, Any] | None: ...


class LLMQuestionGenerator:
    """Prompts a chat model for one ``{"question", "answer"}`` pair per chunk."""

    def __init__(self, llm: ChatProvider, template: str | None = None):
        self.llm = llm
        self.template = template or load_template(None, "generator.txt")
        self.generator_id = f"llm:{llm.model_id}"

    def generate(self, chunk_text: str) -> Mapping[str, Any] | None:
        reply = self.llm.complete([{"role": "user", "content": render(self.template, chunk=chunk_text)}])
        start, end = reply.find("{"), reply.rfind("}")
        if start < 0 or end <= start:
            return None
        try:
            obj = json.loads(reply[start : end + 1])
        except json.JSONDecodeError:
            return None
        return obj if isinstance(obj, dict) else None


def _pair(output: Any) -> tuple[str, str] | None:
    if not isinstance(output, Mapping):
        return None
    q, a = output.get("question"), output.get("answer")
    if not isinstance(q, str) or not isinstance(a, str) or not q.strip() or not a.strip():
        return None
    return q.strip(), a.strip()


def generate_calibration_set(
    store: VectorStore,
    generator: QuestionGenerator,
    n: int,
    seed: int,
    stats: dict | None = None,
) -> list[CalibrationQuestion]:
    """One generated question per chunk, over ``n`` chunks sampled without replacement.

    The sample is the first ``n`` entries of a seeded PCG64 permutation of the
    store. A question whose text repeats an earlier one is discarded and the
    next chunk of the permutation is drawn in its place, until ``n`` distinct
    questions exist or the store runs out. Malformed generator output is
    dropped without replacement and counted in ``stats``.
    """
    if n < 1:
        raise ConfigError(f"number of calibration questions must be >= 1, got {n}")
    if n > len(store):
        raise ConfigError(f"cannot sample {n} chunks from a store of {len(store)}")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(store)).tolist()

    questions: list[CalibrationQuestion] = []
    seen: set[str] = set()
    malformed = duplicates = 0
    pending, cursor = n, 0
    while pending > 0 and cursor < len(order):
        chunk = store.chunks[order[cursor]]
        cursor += 1
        pending -= 1
        pair = _pair(generator.generate(chunk.text))
        if pair is None:
            malformed += 1
            logger.warning("generator returned malformed output for chunk %s; dropped", chunk.chunk_id)
            continue
        question, answer = pair
        if question in seen:
            duplicates += 1
            pending += 1
            continue
        seen.add(question)
        questions.append(
            CalibrationQuestion(
                question_id=f"gen-{len(questions):05d}",
                question=question,
                reference_answer=answer,
                source_doc_id=chunk.doc_id,
                origin="generated",
            )
        )
    if pending > 0:
        logger.warning("chunk pool exhausted with %d questions still missing", pending)
    if stats is not None:
        stats.update(
            seed=seed,
            rng=RNG_ALGORITHM,
            generator_id=getattr(generator, "generator_id", type(generator).__name__),
            n_requested=n,
            n_generated=len(questions),
            n_malformed=malformed,
            n_duplicates_resampled=duplicates,
        )
    return questions


def import_calibration_set(path: str | Path) -> list[CalibrationQuestion]:
    """Read a JSON Lines question file; any unparsable line is fatal."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"question file not found: {path}")
    questions = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not a JSON object")
                text = obj["question"]
                if not isinstance(text, str) or not text.strip():
                    raise ValueError("empty 'question'")
                qid = obj.get("question_id")
                questions.append(
                    CalibrationQuestion(
                        question_id=str(qid) if qid is not None else f"q-{lineno:05d}",
                        question=text,
                        reference_answer=obj.get("reference_answer") or "",
                        source_doc_id=obj.get("source_doc_id"),
                        origin="imported",
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}: malformed question on line {lineno}: {exc}") from exc
    if not questions:
        raise DataError(f"empty calibration set: {path}")
    ids = [q.question_id for q in questions]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"{path}: duplicate question_id(s) {dup[:5]}")
    return questions


def write_questions(path: str | Path, questions: Sequence[CalibrationQuestion]) -> None:
    lines = []
    for q in questions:
        rec = {"question_id": q.question_id, "question": q.question, "reference_answer": q.reference_answer}
        if q.source_doc_id is not None:
            rec["source_doc_id"] = q.source_doc_id
        lines.append(json.dumps(rec, ensure_ascii=False))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def duplicate_question_count(questions: Sequence[CalibrationQuestion]) -> int:
    texts = [q.question for q in questions]
    return len(texts) - len(set(texts))


# --- labeling ----------------------------------------------------------------


def label_question(
    q: CalibrationQuestion,
    store: VectorStore,
    judge: RelevanceJudge,
    embedder: EmbeddingProvider | None = None,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    question_vector: EmbeddingVector | None = None,
    metric: str | None = None,
    judge_failures: list[str] | None = None,
) -> CalibrationRecord | None:
    """Record the score of the first ranked chunk the judge accepts.

    Walks the ranking one chunk at a time, so rank i+1 is only judged after
    rank i was rejected. The accepted chunk need not be the one the question
    was written from. Returns None when nothing within ``max_rank`` (None
    means the whole store) is accepted. A judge that errors on a chunk counts
    as a rejection; the failure is logged and appended to ``judge_failures``.
    """
    if question_vector is None:
        if embedder is None:
            raise ValueError("label_question needs an embedder or a precomputed question_vector")
        (question_vector,) = embedder.embed_batch([q.question])
    for hit in store.iter_ranked(question_vector, limit=max_rank, metric=metric):
        try:
            ok = judge.accept(q.question, q.reference_answer, store.chunk(hit.chunk_id).text)
        except ProviderError as exc:
            logger.warning("judge failed on %s / %s: %s; treated as no", q.question_id, hit.chunk_id, exc)
            if judge_failures is not None:
                judge_failures.append(f"{q.question_id}:{hit.chunk_id}")
            continue
        if ok:
            return CalibrationRecord(q.question_id, hit.chunk_id, hit.rank, hit.score, judge.judge_id)
    return None


def label_questions(
    questions: Sequence[CalibrationQuestion],
    store: VectorStore,
    judge: RelevanceJudge,
    embedder: EmbeddingProvider,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    metric: str | None = None,
    workers: int = 1,
    judge_failures: list[str] | None = None,
    vectors: Sequence[EmbeddingVector] | None = None,
) -> list[CalibrationRecord | None]:
    """Label many questions; results are in question order regardless of ``workers``."""
    if vectors is None:
        vectors = embedder.embed_batch([q.question for q in questions])

    def one(i: int) -> CalibrationRecord | None:
        return label_question(
            questions[i],
            store,
            judge,
            max_rank=max_rank,
            question_vector=vectors[i],
            metric=metric,
            judge_failures=judge_failures,
        )

    if workers <= 1:
        return [one(i) for i in range(len(questions))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(questions))))


# --- report ------------------------------------------------------------------


def _threshold_to_json(t):
    return RETRIEVE_ALL.value if t is RETRIEVE_ALL else t


def _threshold_from_json(v):
    if v == RETRIEVE_ALL.value:
        return RETRIEVE_ALL
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    raise DataError(f"corrupt calibration report: bad threshold {v!r}")


@dataclass
class CalibrationReport:
    alpha: float
    quantile_mode: str
    threshold: Any
    n_questions: int
    n_labeled: int
    n_dropped: int
    scores: list[float]
    embedder_id: str
    metric: str
    store_fingerprint: str
    judge_id: str
    max_rank: int | None
    created_at: str = ""
    threshold_rank: int = 0
    records: list[CalibrationRecord] = field(default_factory=list)
    dropped_question_ids: list[str] = field(default_factory=list)
    duplicate_questions: int = 0
    judge_failures: list[str] = field(default_factory=list)
    question_source: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def verify(self) -> None:
        """Re-derive the threshold from the scores; raise on any inconsistency."""
        if self.n_labeled != len(self.scores) or self.n_labeled + self.n_dropped != self.n_questions:
            raise ContractError(
                f"corrupt calibration report: n_labeled={self.n_labeled}, n_dropped={self.n_dropped}, "
                f"n_questions={self.n_questions}, {len(self.scores)} scores"
            )
        expected = compute_threshold(self.scores, self.alpha, self.quantile_mode)
        if expected is not self.threshold and expected != self.threshold:
            raise ContractError(
                f"corrupt calibration report: stored threshold {self.threshold!r} but scores give {expected!r}"
            )

    def to_json(self) -> str:
        d = asdict(self)
        d["threshold"] = _threshold_to_json(self.threshold)
        d = {"format": REPORT_FORMAT, **d}
        return json.dumps(d, indent=2, ensure_ascii=False, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt calibration report: {exc}") from exc
        if not isinstance(d, dict) or d.pop("format", None) != REPORT_FORMAT:
            raise DataError("not a calibration report (missing format marker)")
        try:
            d["threshold"] = _threshold_from_json(d["threshold"])
            d["records"] = [CalibrationRecord(**r) for r in d.get("records", [])]
            d["scores"] = [float(s) for s in d["scores"]]
            report = cls(**d)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt calibration report: {exc}") from exc
        return report


def report_filename(alpha: float, mode: str) -> str:
    return f"calibration-{alpha!r}-{mode}.json"


def save_report(report: CalibrationReport, path: str | Path) -> Path:
    """Write the report; a directory ``path`` gets the conventional file name."""
    path = Path(path)
    if path.is_dir():
        path = path / report_filename(report.alpha, report.quantile_mode)
    atomic_write_text(path, report.to_json())
    return path


def load_report(path: str | Path) -> CalibrationReport:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"calibration report not found: {path}")
    report = CalibrationReport.from_json(path.read_text(encoding="utf-8"))
    report.verify()
    return report


def run_calibration(
    store: VectorStore,
    questions: Sequence[CalibrationQuestion],
    judge: RelevanceJudge,
    embedder: EmbeddingProvider,
    alpha: float,
    mode: str = DEFAULT_MODE,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    metric: str | None = None,
    strict: bool = False,
    workers: int = 1,
    question_source: dict | None = None,
    created_at: str | None = None,
) -> CalibrationReport:
    """Label every question, drop the unanswerable ones, and compute the cutoff."""
    alpha = check_alpha(alpha)
    check_mode(mode)
    metric = metric or store.metric_default
    if not questions:
        raise DataError("empty calibration set")
    if embedder.embedder_id != store.embedder_id:
        raise ContractError(f"embedder mismatch: embedder {embedder.embedder_id!r} vs store {store.embedder_id!r}")

    failures: list[str] = []
    labels = label_questions(
        questions, store, judge, embedder, max_rank, metric=metric, workers=workers, judge_failures=failures
    )
    return report_from_labels(
        store,
        questions,
        labels,
        judge.judge_id,
        alpha,
        mode,
        max_rank,
        metric=metric,
        strict=strict,
        judge_failures=failures,
        question_source=question_source,
        created_at=created_at,
    )


def report_from_labels(
    store: VectorStore,
    questions: Sequence[CalibrationQuestion],
    labels: Sequence[CalibrationRecord | None],
    judge_id: str,
    alpha: float,
    mode: str = DEFAULT_MODE,
    max_rank: int | None = DEFAULT_MAX_RANK,
    *,
    metric: str | None = None,
    strict: bool = False,
    judge_failures: Sequence[str] = (),
    question_source: dict | None = None,
    created_at: str | None = None,
) -> CalibrationReport:
    """Build a report from labels that were already computed, one per question."""
    alpha = check_alpha(alpha)
    check_mode(mode)
    metric = metric or store.metric_default
    if not questions:
        raise DataError("empty calibration set")
    records = [r for r in labels if r is not None]
    dropped = [q.question_id for q, r in zip(questions, labels) if r is None]
    warnings: list[str] = []
    if dropped:
        msg = f"{len(dropped)} of {len(questions)} calibration questions had no answer chunk within max_rank: {dropped}"
        if strict:
            raise DataError("strict mode: " + msg)
        logger.warning(msg)
        warnings.append(msg)
    if not records:
        raise DataError("no labeled calibration records: every question was dropped")
    drop_rate = len(dropped) / len(questions)
    if drop_rate > DROP_RATE_WARNING:
        msg = (
            f"GUARANTEE VALIDITY WARNING: {drop_rate:.0%} of calibration questions were dropped "
            f"(> {DROP_RATE_WARNING:.0%}); the coverage guarantee may not hold"
        )
        logger.warning(msg)
        warnings.append(msg)
    dups = duplicate_question_count(questions)
    if dups:
        warnings.append(f"{dups} duplicate question text(s) in the calibration set")

    scores = sorted((r.score for r in records), reverse=True)
    report = CalibrationReport(
        alpha=alpha,
        quantile_mode=mode,
        threshold=compute_threshold(scores, alpha, mode),
        threshold_rank=threshold_rank(len(scores), alpha, mode),
        n_questions=len(questions),
        n_labeled=len(records),
        n_dropped=len(dropped),
        scores=scores,
        embedder_id=store.embedder_id,
        metric=metric,
        store_fingerprint=store.fingerprint(),
        judge_id=judge_id,
        max_rank=max_rank,
        created_at=created_at or utc_now(),
        records=records,
        dropped_question_ids=dropped,
        duplicate_questions=dups,
        judge_failures=list(judge_failures),
        question_source=dict(question_source or {}),
        warnings=warnings,
    )
    report.verify()
    return report
