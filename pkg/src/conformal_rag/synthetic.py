"""Seeded synthetic corpus and question workload for coverage experiments.

Documents are sentences of filler words with unique answer phrases planted
at random positions. Each question contains one answer phrase plus filler
noise, and its reference answer is that phrase, so a substring judge labels
it exactly. Questions are i.i.d. given the corpus, which makes any random
calibration/test split exchangeable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import CalibrationQuestion, write_questions
from .corpus import Document, chunk_corpus, chunking_config
from .embedding import ReferenceEmbedder
from .vectorstore import VectorStore, build_store

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticWorkload:
    documents: list[Document]
    questions: list[CalibrationQuestion]
    chunk_size: int
    overlap: int
    dim: int
    seed: int

    def build_store(self, created_at: str = "synthetic") -> VectorStore:
        chunks = chunk_corpus(self.documents, self.chunk_size, self.overlap)
        return build_store(
            chunks,
            ReferenceEmbedder(self.dim),
            chunking=chunking_config(self.chunk_size, self.overlap),
            created_at=created_at,
        )

    def split(self, n_calibration: int) -> tuple[list[CalibrationQuestion], list[CalibrationQuestion]]:
        return self.questions[:n_calibration], self.questions[n_calibration:]

    def write(self, directory: str | Path, n_calibration: int) -> None:
        """Write ``corpus/*.txt``, ``calibration.jsonl`` and ``test.jsonl``."""
        directory = Path(directory)
        corpus = directory / "corpus"
        corpus.mkdir(parents=True, exist_ok=True)
        for doc in self.documents:
            (corpus / doc.doc_id).write_text(doc.text, encoding="utf-8")
        calib, test = self.split(n_calibration)
        write_questions(directory / "calibration.jsonl", calib)
        write_questions(directory / "test.jsonl", test)
        (directory / "workload.json").write_text(
            json.dumps(
                {"seed": self.seed, "chunk_size": self.chunk_size, "overlap": self.overlap, "dim": self.dim},
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


def make_workload(
    seed: int,
    n_docs: int = 200,
    n_questions: int = 600,
    *,
    vocab_size: int = 2000,
    sentences_per_doc: int = 8,
    words_per_sentence: tuple[int, int] = (6, 12),
    answer_tokens: tuple[int, int] = (3, 5),
    noise_tokens: tuple[int, int] = (2, 8),
    chunk_size: int = 16,
    overlap: int = 4,
    dim: int = 256,
) -> SyntheticWorkload:
    """Build a deterministic workload; questions are already shuffled.

    Each document hosts ``ceil(n_questions / n_docs)`` planted phrases whose
    lengths are drawn from the inclusive range ``answer_tokens``; each
    question adds a number of filler words drawn from ``noise_tokens``.
    ``overlap`` must be at least the longest phrase minus one so every phrase
    lies whole inside some chunk.
    """
    if overlap < answer_tokens[1] - 1:
        raise ValueError("overlap too small: a planted phrase could straddle every chunk boundary")
    rng = np.random.Generator(np.random.PCG64(seed))
    vocab: list[str] = []
    seen: set[str] = set()
    while len(vocab) < vocab_size:
        w = _word(rng, int(rng.integers(2, 4)))
        if w not in seen:
            seen.add(w)
            vocab.append(w)

    per_doc = -(-n_questions // n_docs)
    phrases: list[tuple[str, str]] = []  # (doc_id, phrase)
    documents = []
    for d in range(n_docs):
        doc_id = f"doc{d:04d}.txt"
        # Planted phrases are single list items so later plants cannot split them.
        sentences = []
        for _ in range(sentences_per_doc):
            n_words = int(rng.integers(words_per_sentence[0], words_per_sentence[1] + 1))
            words = [vocab[i] for i in rng.integers(vocab_size, size=n_words)]
            sentences.append(words)
        for _ in range(per_doc):
            while True:
                length = int(rng.integers(answer_tokens[0], answer_tokens[1] + 1))
                tokens = ["x" + _word(rng, 3) for _ in range(length)]
                if not any(t in seen for t in tokens):
                    break
            seen.update(tokens)
            target = sentences[int(rng.integers(len(sentences)))]
            pos = int(rng.integers(len(target) + 1))
            target.insert(pos, " ".join(tokens))
            phrases.append((doc_id, " ".join(tokens)))
        text = "\n".join(" ".join(s).capitalize() + "." for s in sentences) + "\n"
        documents.append(Document(doc_id=doc_id, source_path=doc_id, text=text))

    picks = rng.permutation(len(phrases))[:n_questions].tolist()
    questions = []
    for i, p in enumerate(picks):
        doc_id, phrase = phrases[p]
        n_noise = int(rng.integers(noise_tokens[0], noise_tokens[1] + 1))
        noise = [vocab[j] for j in rng.integers(vocab_size, size=n_noise)]
        pos = int(rng.integers(n_noise + 1))
        words = noise[:pos] + [phrase] + noise[pos:]
        questions.append(
            CalibrationQuestion(
                question_id=f"s{seed}-q{i:04d}",
                question=" ".join(words) + "?",
                reference_answer=phrase,
                source_doc_id=doc_id,
                origin="generated",
            )
        )
    return SyntheticWorkload(documents, questions, chunk_size, overlap, dim, seed)
