"""Conformal-calibrated retrieval for retrieval-augmented generation."""
from .calibration import (
    RETRIEVE_ALL,
    CalibrationQuestion,
    CalibrationRecord,
    CalibrationReport,
    compute_threshold,
    generate_calibration_set,
    import_calibration_set,
    label_question,
    load_report,
    run_calibration,
    save_report,
)
from .corpus import Chunk, Document, chunk_document, load_corpus
from .embedding import EmbeddingVector, ReferenceEmbedder, embed_text, reference_embed, similarity
from .evaluation import CoverageResult, evaluate_coverage, sweep_alpha
from .generation import AssembledPrompt, AnswerResult, answer, assemble_context
from .retrieval import RetrievedContext, conformal_retrieve, top_k_retrieve
from .vectorstore import RankedHit, VectorStore, build_store, load_store, save_store

__version__ = "0.1.0"
