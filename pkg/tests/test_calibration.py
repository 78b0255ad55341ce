from __future__ import annotations

import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_rag.calibration import (
    RETRIEVE_ALL,
    CalibrationQuestion,
    CalibrationReport,
    LLMJudge,
    SubstringJudge,
    compute_threshold,
    generate_calibration_set,
    import_calibration_set,
    label_question,
    load_report,
    make_judge,
    report_filename,
    run_calibration,
    save_report,
    threshold_key,
    threshold_rank,
)
from conformal_rag.embedding import ReferenceEmbedder, fnv1a_64, tokenize_for_embedding
from conformal_rag.errors import ConfigError, ContractError, DataError, ProviderError
from conformal_rag.vectorstore import build_store

from conftest import TOY_DIM, ScriptedChat, chunk_text, toy_expected_score
from oracles import oracle_threshold

TEN = [0.92, 0.85, 0.78, 0.70, 0.61, 0.55, 0.43, 0.30, 0.22, 0.10]


# --- compute_threshold -------------------------------------------------------


def test_threshold_examples():
    assert compute_threshold([0.9, 0.8, 0.7, 0.6], 0.25, "paper-percentile") == 0.7
    assert compute_threshold(TEN, 0.2, "paper-percentile") == 0.30
    assert compute_threshold(TEN, 0.2, "finite-sample") == 0.22
    assert compute_threshold([0.5], 0.5, "finite-sample") == 0.5
    assert compute_threshold([0.5], 0.4, "finite-sample") is RETRIEVE_ALL


def test_threshold_ranks():
    assert threshold_rank(4, 0.25, "paper-percentile") == 3
    assert threshold_rank(10, 0.2, "paper-percentile") == 8
    assert threshold_rank(10, 0.2, "finite-sample") == 9
    # 0.9 * 10 is 9.000000000000002 in binary floating point; the decimal alpha keeps k at 9.
    assert threshold_rank(10, 0.1, "paper-percentile") == 9


def test_threshold_input_order_irrelevant():
    assert compute_threshold(list(reversed(TEN)), 0.2, "paper-percentile") == 0.30


def test_threshold_errors():
    with pytest.raises(DataError, match="no labeled calibration records"):
        compute_threshold([], 0.1)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            compute_threshold([0.5], bad)
    with pytest.raises(ConfigError):
        compute_threshold([0.5], 0.1, "interpolated")


score_lists = st.lists(st.sampled_from([round(x, 2) for x in np.linspace(-1, 1, 21)]), min_size=1, max_size=60)
alpha_milli = st.integers(1, 999)


@settings(max_examples=300, deadline=None)
@given(score_lists, alpha_milli, st.sampled_from(["paper-percentile", "finite-sample"]))
def test_threshold_matches_rank_count_oracle(scores, milli, mode):
    got = compute_threshold(scores, milli / 1000, mode)
    want = oracle_threshold(scores, milli, mode)
    if want is None:
        assert got is RETRIEVE_ALL
    else:
        assert got == want
        assert sum(s >= got for s in scores) / len(scores) >= 1 - milli / 1000


@settings(max_examples=200, deadline=None)
@given(score_lists, alpha_milli, alpha_milli)
def test_threshold_monotone_and_mode_ordering(scores, m1, m2):
    a1, a2 = sorted((m1 / 1000, m2 / 1000))
    for mode in ("paper-percentile", "finite-sample"):
        assert threshold_key(compute_threshold(scores, a1, mode)) <= threshold_key(compute_threshold(scores, a2, mode))
    assert threshold_key(compute_threshold(scores, a1, "finite-sample")) <= threshold_key(
        compute_threshold(scores, a1, "paper-percentile")
    )


# --- judges ------------------------------------------------------------------


def test_substring_judge():
    j = SubstringJudge()
    assert j.accept("q", "Blue  Whale", "the blue\nwhale swims")
    assert not j.accept("q", "orca", "the blue whale")
    assert not j.accept("q", "", "anything")


def test_llm_judge_strict_yes_no():
    chat = ScriptedChat(["Yes."])
    assert LLMJudge(chat).accept("q", "a", "c")
    chat = ScriptedChat(["maybe", "no"])
    assert not LLMJudge(chat).accept("q", "a", "c")
    assert len(chat.calls) == 2
    chat = ScriptedChat(["perhaps", "yes, definitely"])
    assert not LLMJudge(chat).accept("q", "a", "c")
    assert LLMJudge(ScriptedChat([])).judge_id == "llm:scripted"


def test_make_judge():
    assert make_judge("substring").judge_id == "substring-v1"
    with pytest.raises(ConfigError):
        make_judge("llm")
    with pytest.raises(ConfigError):
        make_judge("oracle")


# --- labeling ----------------------------------------------------------------


def test_rank_three_label():
    # Question tokens {alpha, beta, gamma}. Chunk A shares two, B one of its two,
    # C one of its four: cosines 2/sqrt(6), 1/sqrt(6), 1/sqrt(12).
    dim = 8192
    texts = {"A.txt": "alpha beta", "B.txt": "alpha delta", "C.txt": "gamma zeta epsilon eta"}
    question = "alpha beta gamma"
    tokens = {t for s in list(texts.values()) + [question] for t in tokenize_for_embedding(s)}
    assert len({fnv1a_64(t.encode()) % dim for t in tokens}) == len(tokens)

    emb = ReferenceEmbedder(dim)
    store = build_store([chunk_text(d, t) for d, t in texts.items()], emb)
    q = CalibrationQuestion("q1", question, reference_answer="zeta", source_doc_id="A.txt")
    rec = label_question(q, store, SubstringJudge(), emb)
    assert rec.answer_chunk_id == "C.txt#000000"
    assert rec.answer_rank == 3
    assert rec.score == pytest.approx(1 / math.sqrt(12), abs=1e-12)

    q1 = CalibrationQuestion("q2", question, reference_answer="beta")
    rec1 = label_question(q1, store, SubstringJudge(), emb)
    assert (rec1.answer_rank, rec1.answer_chunk_id) == (1, "A.txt#000000")
    assert rec1.score == pytest.approx(2 / math.sqrt(6), abs=1e-12)

    assert label_question(q, store, SubstringJudge(), emb, max_rank=2) is None


def test_label_walks_sequentially_and_stops_at_first_accept(toy_store, toy_questions):
    calls = []

    class Recording:
        judge_id = "rec"

        def accept(self, question, answer, chunk):
            calls.append(chunk)
            return answer in chunk.split()

    emb = ReferenceEmbedder(TOY_DIM)
    rec = label_question(toy_questions[0], toy_store, Recording(), emb)
    assert rec.answer_rank == 1 and len(calls) == 1

    calls.clear()
    never = CalibrationQuestion("x", "key1 zzz", "absent")
    assert label_question(never, toy_store, Recording(), emb, max_rank=10) is None
    assert len(calls) == 10


def test_label_score_rederivable(toy_store, toy_questions):
    emb = ReferenceEmbedder(TOY_DIM)
    for q in toy_questions:
        rec = label_question(q, toy_store, SubstringJudge(), emb)
        (vec,) = emb.embed_batch([q.question])
        scores = {h.chunk_id: h.score for h in toy_store.ranked_query(vec)}
        assert rec.score == scores[rec.answer_chunk_id]


def test_judge_failure_counts_as_no():
    class Flaky:
        judge_id = "flaky"

        def __init__(self):
            self.n = 0

        def accept(self, question, answer, chunk):
            self.n += 1
            if self.n == 1:
                raise ProviderError("down", 5)
            return True

    emb = ReferenceEmbedder(64)
    store = build_store([chunk_text("a", "red apple"), chunk_text("b", "green apple")], emb)
    failures = []
    rec = label_question(CalibrationQuestion("q", "red apple"), store, Flaky(), emb, judge_failures=failures)
    assert rec.answer_rank == 2
    assert failures == ["q:a#000000"]


# --- toy end-to-end ------------------------------------------------------------


def test_toy_labels_match_hand_scores(toy_store, toy_questions):
    report = run_calibration(toy_store, toy_questions, SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2)
    for i, rec in enumerate(report.records, start=1):
        assert rec.answer_chunk_id == f"doc{i:02d}.txt#000000"
        assert rec.answer_rank == 1
        assert rec.score == pytest.approx(toy_expected_score(i), abs=1e-12)


def test_run_calibration_toy_threshold(toy_store, toy_questions):
    emb = ReferenceEmbedder(TOY_DIM)
    fs = run_calibration(toy_store, toy_questions, SubstringJudge(), emb, 0.2, "finite-sample")
    assert fs.n_labeled == 10 and fs.n_dropped == 0
    # Scores fall with i, so the 9th highest belongs to doc 9.
    assert fs.threshold == pytest.approx(1 / (2 * math.sqrt(10)), abs=1e-12)
    pp = run_calibration(toy_store, toy_questions, SubstringJudge(), emb, 0.2, "paper-percentile")
    assert pp.threshold == pytest.approx(1 / 6, abs=1e-12)
    assert fs.embedder_id == toy_store.embedder_id
    assert fs.store_fingerprint == toy_store.fingerprint()
    assert fs.warnings == []


def test_run_calibration_drops_and_warns(toy_store, toy_questions, caplog):
    qs = list(toy_questions[:7]) + [
        CalibrationQuestion(f"bad{i}", f"nothing here {i}", "not in corpus") for i in range(3)
    ]
    with caplog.at_level(logging.WARNING):
        report = run_calibration(toy_store, qs, SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2)
    assert report.n_labeled == 7 and report.n_dropped == 3
    assert report.dropped_question_ids == ["bad0", "bad1", "bad2"]
    assert "GUARANTEE VALIDITY WARNING" in caplog.text
    assert any("GUARANTEE VALIDITY" in w for w in report.warnings)
    with pytest.raises(DataError, match="strict"):
        run_calibration(toy_store, qs, SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2, strict=True)


def test_run_calibration_all_dropped(toy_store):
    qs = [CalibrationQuestion("a", "nothing", "absent")]
    with pytest.raises(DataError, match="no labeled calibration records"):
        run_calibration(toy_store, qs, SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2)


def test_run_calibration_embedder_mismatch(toy_store, toy_questions):
    with pytest.raises(ContractError, match="reference-fnv1a64-bow:64"):
        run_calibration(toy_store, toy_questions, SubstringJudge(), ReferenceEmbedder(64), 0.2)


def test_parallel_labeling_same_report(toy_store, toy_questions):
    emb = ReferenceEmbedder(TOY_DIM)
    a = run_calibration(toy_store, toy_questions, SubstringJudge(), emb, 0.1, created_at="t")
    b = run_calibration(toy_store, toy_questions, SubstringJudge(), emb, 0.1, workers=4, created_at="t")
    assert a.to_json() == b.to_json()


# --- report persistence ----------------------------------------------------------


def test_report_round_trip(tmp_path, toy_store, toy_questions):
    report = run_calibration(toy_store, toy_questions, SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2)
    path = save_report(report, tmp_path)
    assert path.name == "calibration-0.2-finite-sample.json" == report_filename(0.2, "finite-sample")
    loaded = load_report(path)
    assert loaded == report
    assert loaded.to_json() == report.to_json()


def test_sentinel_report_round_trip(tmp_path, toy_store, toy_questions):
    report = run_calibration(
        toy_store, toy_questions[:3], SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2
    )
    assert report.threshold is RETRIEVE_ALL
    loaded = load_report(save_report(report, tmp_path / "r.json"))
    assert loaded.threshold is RETRIEVE_ALL


def test_tampered_report_detected(tmp_path, toy_store, toy_questions):
    report = run_calibration(toy_store, toy_questions, SubstringJudge(), ReferenceEmbedder(TOY_DIM), 0.2)
    path = save_report(report, tmp_path / "r.json")
    d = json.loads(path.read_text())
    d["threshold"] = 0.5
    path.write_text(json.dumps(d))
    with pytest.raises(ContractError, match="corrupt calibration report"):
        load_report(path)
    d = json.loads(report.to_json())
    d["n_dropped"] = 4
    path.write_text(json.dumps(d))
    with pytest.raises(ContractError, match="corrupt calibration report"):
        load_report(path)


def test_report_not_a_report(tmp_path):
    p = tmp_path / "r.json"
    p.write_text("{}")
    with pytest.raises(DataError):
        load_report(p)
    with pytest.raises(DataError):
        CalibrationReport.from_json("not json")


# --- question sets ------------------------------------------------------------------


class StubGenerator:
    generator_id = "stub"

    def __init__(self, fn):
        self.fn = fn
        self.seen = []

    def generate(self, chunk_text):
        self.seen.append(chunk_text)
        return self.fn(chunk_text)


def gen_store():
    return build_store([chunk_text(f"d{i}", f"fact number {i}") for i in range(8)], ReferenceEmbedder(64))


def test_generation_deterministic():
    store = gen_store()
    run = lambda: generate_calibration_set(  # noqa: E731
        store, StubGenerator(lambda t: {"question": f"what is {t}?", "answer": t}), 3, seed=11
    )
    a, b = run(), run()
    assert a == b and len(a) == 3
    assert len({q.question for q in a}) == 3
    assert all(q.origin == "generated" and q.source_doc_id for q in a)
    c = generate_calibration_set(store, StubGenerator(lambda t: {"question": f"what is {t}?", "answer": t}), 3, seed=12)
    assert [q.question for q in c] != [q.question for q in a]


def test_generation_resamples_duplicates():
    store = gen_store()
    # The first two chunks of the permutation produce the same question text.
    order = np.random.Generator(np.random.PCG64(5)).permutation(8).tolist()
    twins = {store.chunks[order[0]].text, store.chunks[order[1]].text}

    def fn(t):
        return {"question": "same?" if t in twins else f"q {t}?", "answer": t}

    gen = StubGenerator(fn)
    stats = {}
    qs = generate_calibration_set(store, gen, 3, seed=5, stats=stats)
    assert len(qs) == 3 and len({q.question for q in qs}) == 3
    assert len(gen.seen) == 4
    assert stats["n_duplicates_resampled"] == 1 and stats["rng"] == "numpy.PCG64" and stats["seed"] == 5


def test_generation_drops_malformed():
    store = gen_store()
    gen = StubGenerator(lambda t: None if t.endswith("3") else {"question": f"q {t}", "answer": t})
    stats = {}
    qs = generate_calibration_set(store, gen, 8, seed=0, stats=stats)
    assert len(qs) == 7 and stats["n_malformed"] == 1


def test_generation_bounds():
    store = gen_store()
    gen = StubGenerator(lambda t: {"question": t, "answer": t})
    with pytest.raises(ConfigError):
        generate_calibration_set(store, gen, 0, seed=0)
    with pytest.raises(ConfigError):
        generate_calibration_set(store, gen, 9, seed=0)


def test_import_question_file(tmp_path):
    p = tmp_path / "q.jsonl"
    p.write_text('{"question_id": "a", "question": "one?", "reference_answer": "x"}\n{"question": "two?"}\n')
    qs = import_calibration_set(p)
    assert [q.question_id for q in qs] == ["a", "q-00002"]
    assert qs[1].reference_answer == "" and all(q.origin == "imported" for q in qs)


def test_import_errors(tmp_path):
    p = tmp_path / "q.jsonl"
    p.write_text('{"question": "a"}\n{"question": "b"}\n{"question": \n')
    with pytest.raises(DataError, match="line 3"):
        import_calibration_set(p)
    p.write_text("")
    with pytest.raises(DataError, match="empty calibration set"):
        import_calibration_set(p)
    p.write_text('{"question_id": "a", "question": "x"}\n{"question_id": "a", "question": "y"}\n')
    with pytest.raises(DataError, match="duplicate"):
        import_calibration_set(p)


def test_question_requires_text():
    with pytest.raises(DataError):
        CalibrationQuestion("q", "   ")
