from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_rag.calibration import RETRIEVE_ALL, CalibrationReport, compute_threshold
from conformal_rag.errors import ConfigError, ContractError
from conformal_rag.retrieval import conformal_retrieve, top_k_retrieve
from conformal_rag.vectorstore import build_store

from conftest import TableEmbedder, chunk_text
from oracles import oracle_filter

TEN = [0.92, 0.85, 0.78, 0.70, 0.61, 0.55, 0.43, 0.30, 0.22, 0.10]


def make_report(store, scores, alpha, mode, metric="dot"):
    return CalibrationReport(
        alpha=alpha,
        quantile_mode=mode,
        threshold=compute_threshold(scores, alpha, mode),
        n_questions=len(scores),
        n_labeled=len(scores),
        n_dropped=0,
        scores=sorted(scores, reverse=True),
        embedder_id=store.embedder_id,
        metric=metric,
        store_fingerprint=store.fingerprint(),
        judge_id="test",
        max_rank=None,
    )


def scored_store(scores: dict[str, float]):
    """Chunk j is the unit vector e_j and the query is sum(score_j e_j), so dot scores are exact."""
    names = sorted(scores)
    dim = len(names)
    table = {n: np.eye(dim)[i].tolist() for i, n in enumerate(names)}
    table["q"] = [scores[n] for n in names]
    emb = TableEmbedder(table)
    return build_store([chunk_text(n, n) for n in names], emb, metric="dot"), emb


def test_geq_vs_strict_examples():
    store, emb = scored_store({"A": 0.92, "B": 0.30, "C": 0.29})
    report = make_report(store, TEN, 0.2, "paper-percentile")
    assert report.threshold == 0.30
    geq = conformal_retrieve("q", store, report, emb, comparison="geq")
    assert geq.chunk_ids == ["A#000000", "B#000000"]
    assert [h.score for h in geq.hits] == [0.92, 0.30]
    strict = conformal_retrieve("q", store, report, emb, comparison="strict-gt")
    assert strict.chunk_ids == ["A#000000"]
    assert not geq.truncated and geq.threshold_used == 0.30 and geq.alpha == 0.2


def test_retrieve_all_sentinel():
    store, emb = scored_store({c: s for c, s in zip("ABCDE", [0.1, 0.5, -0.2, 0.5, 0.0])})
    report = make_report(store, [0.5], 0.4, "finite-sample")
    assert report.threshold is RETRIEVE_ALL
    ctx = conformal_retrieve("q", store, report, emb)
    assert ctx.chunk_ids == ["B#000000", "D#000000", "A#000000", "E#000000", "C#000000"]
    assert [h.rank for h in ctx.hits] == [1, 2, 3, 4, 5]
    assert ctx.to_dict()["threshold_used"] == "RETRIEVE_ALL"


def test_budget_truncation_is_loud(caplog):
    store, emb = scored_store({"A": 0.9, "B": 0.8, "C": 0.7})
    report = make_report(store, [0.5], 0.5, "finite-sample")
    with caplog.at_level(logging.WARNING):
        ctx = conformal_retrieve("q", store, report, emb, budget=2)
    assert ctx.chunk_ids == ["A#000000", "B#000000"]
    assert ctx.truncated and ctx.truncation_reason == "budget" and ctx.n_qualifying == 3
    assert "guarantee" in caplog.text
    ctx = conformal_retrieve("q", store, report, emb, budget=3)
    assert not ctx.truncated and ctx.truncation_reason is None
    with pytest.raises(ConfigError):
        conformal_retrieve("q", store, report, emb, budget=0)


def test_empty_result_is_not_an_error():
    store, emb = scored_store({"A": 0.1, "B": 0.2})
    report = make_report(store, [0.9], 0.5, "finite-sample")
    ctx = conformal_retrieve("q", store, report, emb)
    assert ctx.hits == [] and not ctx.truncated


def test_report_contract_checks(caplog):
    store, emb = scored_store({"A": 0.1, "B": 0.2})
    report = make_report(store, [0.9], 0.5, "finite-sample")
    report.embedder_id = "elsewhere"
    with pytest.raises(ContractError, match="elsewhere"):
        conformal_retrieve("q", store, report, emb)
    report = make_report(store, [0.9, 0.1], 0.5, "finite-sample")
    report.threshold = 0.5
    with pytest.raises(ContractError, match="corrupt"):
        conformal_retrieve("q", store, report, emb)
    report = make_report(store, [0.9], 0.5, "finite-sample")
    report.store_fingerprint = "0" * 64
    with caplog.at_level(logging.WARNING):
        conformal_retrieve("q", store, report, emb)
    assert "fingerprint" in caplog.text


def test_top_k():
    store, emb = scored_store({"A": 0.9, "B": 0.3, "C": 0.5})
    (q,) = emb.embed_batch(["q"])
    assert top_k_retrieve("q", store, 2, emb).chunk_ids == ["A#000000", "C#000000"]
    assert top_k_retrieve("q", store, 10, emb).chunk_ids == ["A#000000", "C#000000", "B#000000"]
    assert top_k_retrieve("q", store, 1, emb).hits == store.ranked_query(q, limit=1)
    assert top_k_retrieve("q", store, 1, emb).threshold_used is None
    with pytest.raises(ConfigError):
        top_k_retrieve("q", store, 0, emb)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.sampled_from([-0.5, 0.0, 0.1, 0.3, 0.3, 0.7, 1.0]), min_size=1, max_size=60),
    st.lists(st.sampled_from([-0.5, 0.0, 0.1, 0.3, 0.7, 1.0]), min_size=1, max_size=10),
    st.floats(0.05, 0.95),
    st.sampled_from(["geq", "strict-gt"]),
    st.sampled_from(["paper-percentile", "finite-sample"]),
)
def test_matches_filter_oracle(scores, calib, alpha, comparison, mode):
    store, emb = scored_store({f"c{i:02d}": s for i, s in enumerate(scores)})
    report = make_report(store, calib, alpha, mode)
    (q,) = emb.embed_batch(["q"])
    t = None if report.threshold is RETRIEVE_ALL else report.threshold
    ctx = conformal_retrieve("q", store, report, question_vector=q, comparison=comparison)
    assert ctx.chunk_ids == oracle_filter(store, q, t, comparison, "dot")


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=40),
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=20),
    st.floats(0.01, 0.98),
    st.floats(0.01, 0.98),
)
def test_nested_in_alpha(scores, calib, a1, a2):
    a1, a2 = sorted((a1, a2))
    store, emb = scored_store({f"c{i:02d}": s for i, s in enumerate(scores)})
    (q,) = emb.embed_batch(["q"])
    small = conformal_retrieve("q", store, make_report(store, calib, a1, "finite-sample"), question_vector=q)
    large = conformal_retrieve("q", store, make_report(store, calib, a2, "finite-sample"), question_vector=q)
    assert set(large.chunk_ids) <= set(small.chunk_ids)
