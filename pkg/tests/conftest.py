from __future__ import annotations

import numpy as np
import pytest

from conformal_rag.calibration import CalibrationQuestion
from conformal_rag.corpus import Chunk, Document, chunk_document
from conformal_rag.embedding import EmbeddingVector, fnv1a_64, tokenize_for_embedding
from conformal_rag.vectorstore import build_store

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class TableEmbedder:
    """Maps known texts to fixed vectors; for hand-built score layouts."""

    def __init__(self, table: dict[str, list[float]], embedder_id: str = "table"):
        self.table = table
        self.embedder_id = embedder_id
        self.dim = len(next(iter(table.values())))

    def embed_batch(self, texts):
        return [EmbeddingVector(np.array(self.table[t], dtype=float), self.embedder_id) for t in texts]


class EchoChat:
    """Echoes the user message, or the abstention sentence when no sources were given."""

    model_id = "echo-stub"

    def __init__(self, abstention: str = "I cannot answer this question from the available context."):
        self.calls = 0
        self.abstention = abstention

    def complete(self, messages):
        self.calls += 1
        user = messages[-1]["content"]
        return user if "[source:" in user else self.abstention


class ScriptedChat:
    model_id = "scripted"

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def complete(self, messages):
        self.calls.append(messages)
        return self.replies.pop(0)


def chunk_text(doc_id: str, text: str) -> Chunk:
    (c,) = chunk_document(Document(doc_id, doc_id, text), chunk_size=1000, overlap=0)
    return c


# Toy calibration corpus: doc i holds "key{i}" plus i private filler words, and
# question i is "key{i}" plus three private words. With no hash collisions the
# only shared bucket is key{i}, so the answer chunk scores 1 / (2 sqrt(1 + i))
# and every other chunk scores 0.
TOY_DIM = 4096
TOY_N = 10


def toy_doc_text(i: int) -> str:
    return " ".join([f"key{i}"] + [f"d{i}w{j}" for j in range(i)])


def toy_question_text(i: int) -> str:
    return f"key{i} q{i}a q{i}b q{i}c"


def toy_expected_score(i: int) -> float:
    return 1.0 / (2.0 * np.sqrt(1.0 + i))


@pytest.fixture(scope="session")
def toy_chunks():
    chunks = [chunk_text(f"doc{i:02d}.txt", toy_doc_text(i)) for i in range(1, TOY_N + 1)]
    tokens = set()
    for i in range(1, TOY_N + 1):
        tokens.update(tokenize_for_embedding(toy_doc_text(i)))
        tokens.update(tokenize_for_embedding(toy_question_text(i)))
    buckets = {fnv1a_64(t.encode()) % TOY_DIM for t in tokens}
    assert len(buckets) == len(tokens), "toy fixture needs collision-free buckets"
    return chunks


@pytest.fixture(scope="session")
def toy_store(toy_chunks):
    from conformal_rag.embedding import ReferenceEmbedder

    return build_store(toy_chunks, ReferenceEmbedder(TOY_DIM), created_at="2026-01-01T00:00:00+00:00")


@pytest.fixture(scope="session")
def toy_questions():
    return [
        CalibrationQuestion(f"q{i:02d}", toy_question_text(i), f"key{i}", f"doc{i:02d}.txt")
        for i in range(1, TOY_N + 1)
    ]
