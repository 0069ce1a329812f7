import json
import logging

import pytest

from slhyde.benchkit import (
    CandidatePair,
    PipelineConfig,
    RawQuery,
    filter_pseudo_relevant,
    load_raw_queries,
    load_raw_texts,
    match_positive_pairs,
    medical_relevance_filter,
    run_pipeline,
)
from slhyde.bm25 import Bm25Index
from slhyde.corpus import CorpusStore, Document, load_corpus, load_qrels, load_queries
from slhyde.errors import ValidationError
from slhyde.textgen import MockGeneratorClient


def _json(obj):
    return json.dumps(obj, ensure_ascii=False)


def judge_with(rules):
    """Scripted judge: dispatches on the prompt's instruction line, then applies
    per-item rules keyed by markers embedded in the prompt."""

    def responder(prompt, cfg):
        for handler_prefix, handler in rules:
            if prompt.startswith(handler_prefix):
                return handler(prompt)
        raise AssertionError(f"no scripted rule for prompt: {prompt.splitlines()[0]!r}")

    return MockGeneratorClient(responder=responder)


MED_PREFIX = "You will receive a question-answer pair."
RERANK_PREFIX = "You will be given a medical question and a numbered list"
EVIDENCE_PREFIX = "You will be given a medical question, its answer and a related document."
ANSWER_PREFIX = "You will be given a medical question and one or more evidence spans"
VALIDATE_PREFIX = "You will be given a medical question, a reference (standard) answer"
QD_PREFIX = "You will be given a medical search query and its associated passage."


class TestMedicalRelevanceFilter:
    def test_below_threshold_removed(self):
        judge = judge_with([(MED_PREFIX, lambda p: _json({"score": 0.4, "reason": "weak"}))])
        kept, removed, review = medical_relevance_filter([("t1", "text")], judge, threshold=0.5)
        assert not kept and not review
        assert removed[0].text_id == "t1"
        assert removed[0].med_score == pytest.approx(0.4)
        assert removed[0].rationale == "weak"

    def test_exactly_at_threshold_kept(self):
        judge = judge_with([(MED_PREFIX, lambda p: _json({"score": 0.5, "reason": "edge"}))])
        kept, removed, review = medical_relevance_filter([("t1", "text")], judge, threshold=0.5)
        assert kept and not removed and not review

    def test_label_field_maps_to_binary_score(self):
        judge = judge_with([(MED_PREFIX, lambda p: _json({"label": 1, "reason": "medical"}))])
        kept, _, _ = medical_relevance_filter([("t1", "text")], judge, threshold=0.5)
        assert kept[0].med_score == 1.0

    def test_malformed_json_goes_to_review_and_continues(self):
        calls = {"n": 0}

        def broken(prompt):
            calls["n"] += 1
            return "not json at all"

        judge = judge_with([(MED_PREFIX, broken)])
        kept, removed, review = medical_relevance_filter(
            [("bad", "text"), ("bad2", "text2")], judge, threshold=0.5
        )
        assert not kept and not removed
        assert [r.item_id for r in review] == ["bad", "bad2"]
        assert calls["n"] == 4  # one repair retry per item

    def test_repair_retry_can_succeed(self):
        def flaky(prompt):
            if prompt.endswith("keys."):  # the repair suffix
                return _json({"label": 1, "reason": "fixed"})
            return "<<garbage>>"

        judge = judge_with([(MED_PREFIX, flaky)])
        kept, removed, review = medical_relevance_filter([("t1", "text")], judge, threshold=0.5)
        assert kept and not review


def _matching_fixture():
    """Three docs; the judge validates only doc d2 of the reranked top 3."""
    docs = [
        Document(id="d1", text="alpha condition overview shared terms"),
        Document(id="d2", text="alpha condition treatment details shared terms"),
        Document(id="d3", text="alpha condition prevention notes shared terms"),
    ]
    store = CorpusStore(docs)
    bm25 = Bm25Index.build(store, tokenizer="simple")
    query = RawQuery(id="q1", text="alpha condition treatment", answer="use the alpha protocol")

    def rerank(prompt):
        return _json({"ranking": [2, 1, 3]})

    def evidence(prompt):
        if "treatment details" in prompt:
            return _json({"evidence_spans": ["alpha condition treatment details"]})
        return _json({"evidence_spans": []})

    def answer(prompt):
        return _json({"answer": "alpha protocol treats it", "reason": "from evidence"})

    def validate(prompt):
        return _json({"similarity_score": 0.9, "explanation": "matches"})

    judge = judge_with(
        [
            (RERANK_PREFIX, rerank),
            (EVIDENCE_PREFIX, evidence),
            (ANSWER_PREFIX, answer),
            (VALIDATE_PREFIX, validate),
        ]
    )
    return store, bm25, query, judge


class TestMatchPositivePairs:
    def test_only_validated_doc_returned(self):
        store, bm25, query, judge = _matching_fixture()
        cfg = PipelineConfig(judge=judge)
        review = []
        pairs = match_positive_pairs(query, bm25, judge, cfg, store, review)
        assert [p.doc_id for p in pairs] == ["d2"]
        assert pairs[0].validated is True
        assert pairs[0].evidence_spans
        assert not review

    def test_empty_evidence_rejects_pair(self):
        store, bm25, query, judge = _matching_fixture()
        cfg = PipelineConfig(judge=judge)
        pairs = match_positive_pairs(query, bm25, judge, cfg, store, [])
        assert all(p.doc_id != "d1" for p in pairs)
        assert all(p.doc_id != "d3" for p in pairs)

    def test_low_similarity_fails_validation(self):
        store, bm25, query, _ = _matching_fixture()

        judge = judge_with(
            [
                (RERANK_PREFIX, lambda p: _json({"ranking": [1, 2, 3]})),
                (EVIDENCE_PREFIX, lambda p: _json({"evidence_spans": ["some span"]})),
                (ANSWER_PREFIX, lambda p: _json({"answer": "unrelated", "reason": "r"})),
                (VALIDATE_PREFIX, lambda p: _json({"similarity_score": 0.1, "explanation": "no"})),
            ]
        )
        cfg = PipelineConfig(judge=judge)
        assert match_positive_pairs(query, bm25, judge, cfg, store, []) == []

    def test_unparseable_rerank_routes_query_to_review(self):
        store, bm25, query, _ = _matching_fixture()
        judge = judge_with([(RERANK_PREFIX, lambda p: "garbage")])
        cfg = PipelineConfig(judge=judge)
        review = []
        pairs = match_positive_pairs(query, bm25, judge, cfg, store, review)
        assert pairs == []
        assert review and review[0].stage == "rerank"

    def test_rerank_cap_respected(self):
        store, bm25, query, _ = _matching_fixture()
        judge = judge_with(
            [
                (RERANK_PREFIX, lambda p: _json({"ranking": [1, 2, 3]})),
                (EVIDENCE_PREFIX, lambda p: _json({"evidence_spans": ["span"]})),
                (ANSWER_PREFIX, lambda p: _json({"answer": "a", "reason": "r"})),
                (VALIDATE_PREFIX, lambda p: _json({"similarity_score": 1.0, "explanation": "e"})),
            ]
        )
        cfg = PipelineConfig(judge=judge, rerank_top_m=2)
        pairs = match_positive_pairs(query, bm25, judge, cfg, store, [])
        assert len(pairs) == 2  # top-m cap, not all 3


class TestFilterPseudoRelevant:
    def _pair(self, qid="q1", doc="d1"):
        return CandidatePair(
            query_id=qid,
            doc_id=doc,
            query_text="query text",
            doc_text="doc text",
            evidence_spans=["span"],
            generated_answer="ans",
            validated=True,
        )

    def test_quality_two_of_five_removed_at_point_six(self):
        judge = judge_with([(QD_PREFIX, lambda p: _json({"quality_score": 2, "explanation": "weak"}))])
        kept = filter_pseudo_relevant([self._pair()], judge, threshold=0.6)
        assert kept == []

    def test_quality_five_kept(self):
        judge = judge_with([(QD_PREFIX, lambda p: _json({"quality_score": 5, "explanation": "great"}))])
        kept = filter_pseudo_relevant([self._pair()], judge, threshold=0.6)
        assert len(kept) == 1
        assert kept[0].rel_score == pytest.approx(1.0)

    def test_threshold_boundary_keeps(self):
        judge = judge_with([(QD_PREFIX, lambda p: _json({"quality_score": 3, "explanation": "ok"}))])
        kept = filter_pseudo_relevant([self._pair()], judge, threshold=0.6)
        assert len(kept) == 1  # 3/5 = 0.6 >= 0.6

    def test_mixed_scores_match_pointwise_predicate(self):
        scores = {"d1": 1, "d2": 2, "d3": 3, "d4": 4, "d5": 5}

        def qd(prompt):
            for doc, score in scores.items():
                if f"text for {doc}" in prompt:
                    return _json({"quality_score": score, "explanation": "scripted"})
            raise AssertionError("unknown doc")

        judge = judge_with([(QD_PREFIX, qd)])
        pairs = [
            CandidatePair(
                query_id="q",
                doc_id=doc,
                query_text="q text",
                doc_text=f"text for {doc}",
                evidence_spans=["s"],
                generated_answer="a",
                validated=True,
            )
            for doc in scores
        ]
        kept = filter_pseudo_relevant(pairs, judge, threshold=0.6)
        expected = [doc for doc, score in scores.items() if score / 5.0 >= 0.6]
        assert [p.doc_id for p in kept] == expected

    def test_unparseable_goes_to_review(self):
        judge = judge_with([(QD_PREFIX, lambda p: "???")])
        review = []
        kept = filter_pseudo_relevant([self._pair()], judge, threshold=0.6, review=review)
        assert kept == [] and review


def _pipeline_judge(med_labels, validated_docs, quality_scores):
    """Scripted judge for full pipeline runs; ids are embedded in item texts."""

    def med(prompt):
        for item_id, label in med_labels.items():
            if f"[{item_id}]" in prompt:
                return _json({"label": label, "reason": f"scripted for {item_id}"})
        return _json({"label": 1, "reason": "default keep"})

    def rerank(prompt):
        return _json({"ranking": [1, 2, 3]})

    def evidence(prompt):
        for doc_id in validated_docs:
            if f"[{doc_id}]" in prompt:
                return _json({"evidence_spans": [f"evidence from {doc_id}"]})
        return _json({"evidence_spans": []})

    def answer(prompt):
        return _json({"answer": "generated answer", "reason": "r"})

    def validate(prompt):
        return _json({"similarity_score": 0.95, "explanation": "consistent"})

    def qd(prompt):
        for doc_id, score in quality_scores.items():
            if f"[{doc_id}]" in prompt:
                return _json({"quality_score": score, "explanation": "scripted"})
        return _json({"quality_score": 5, "explanation": "default"})

    return judge_with(
        [
            (MED_PREFIX, med),
            (RERANK_PREFIX, rerank),
            (EVIDENCE_PREFIX, evidence),
            (ANSWER_PREFIX, answer),
            (VALIDATE_PREFIX, validate),
            (QD_PREFIX, qd),
        ]
    )


def _pipeline_inputs():
    texts = [
        ("t1", "[t1] alpha treatment basics shared"),
        ("t2", "[t2] alpha treatment advanced shared"),
        ("t3", "[t3] cooking recipes nothing medical"),
    ]
    queries = [
        RawQuery(id="qa", text="[qa] alpha treatment question"),
        RawQuery(id="qb", text="[qb] stock market question"),
    ]
    return texts, queries


class TestRunPipeline:
    def test_end_to_end_emits_exactly_surviving_pairs(self, tmp_path):
        texts, queries = _pipeline_inputs()
        judge = _pipeline_judge(
            med_labels={"t3": 0, "qb": 0},  # cooking text and stock query removed
            validated_docs={"t1", "t2"},
            quality_scores={"t1": 5, "t2": 2},  # t2 pair fails the 0.6 threshold
        )
        cfg = PipelineConfig(judge=judge)
        report = run_pipeline(texts, queries, cfg, tmp_path / "out")
        qrels = load_qrels(tmp_path / "out" / "qrels.tsv")
        assert qrels.entries == {"qa": {"t1": 1}}
        emitted_queries = load_queries(tmp_path / "out" / "queries.jsonl")
        assert [q.id for q in emitted_queries] == ["qa"]
        store = load_corpus(tmp_path / "out" / "corpus.jsonl")
        assert store.ids == ["t1", "t2"]  # medically kept texts
        assert report.stages["1_medical_filter_texts"]["kept"] == 2
        assert report.stages["1_medical_filter_texts"]["removed"] == 1
        assert not report.flagged

    def test_stage_counts_conserve(self, tmp_path):
        texts, queries = _pipeline_inputs()
        judge = _pipeline_judge(med_labels={}, validated_docs={"t1"}, quality_scores={})
        report = run_pipeline(texts, queries, PipelineConfig(judge=judge), tmp_path / "out")
        for stage in ("1_medical_filter_texts", "1_medical_filter_queries"):
            counts = report.stages[stage]
            assert counts["kept"] + counts["removed"] + counts["review"] == counts["input"]
        stage3 = report.stages["3_relevance_filter"]
        assert stage3["kept"] + stage3["removed"] + stage3["review"] == stage3["input"]

    def test_zero_survivors_is_valid_empty_dataset_with_warning(self, tmp_path, caplog):
        texts, queries = _pipeline_inputs()
        judge = _pipeline_judge(med_labels={}, validated_docs=set(), quality_scores={})
        with caplog.at_level(logging.WARNING):
            report = run_pipeline(texts, queries, PipelineConfig(judge=judge), tmp_path / "out")
        assert (tmp_path / "out" / "qrels.tsv").exists()
        assert load_qrels(tmp_path / "out" / "qrels.tsv").entries == {}
        assert any("ZERO" in w for w in report.warnings)

    def test_rerun_is_byte_identical(self, tmp_path):
        texts, queries = _pipeline_inputs()

        def run(out):
            judge = _pipeline_judge(
                med_labels={"t3": 0}, validated_docs={"t1", "t2"}, quality_scores={"t2": 1}
            )
            run_pipeline(texts, queries, PipelineConfig(judge=judge), out)
            return {
                path.name: path.read_bytes()
                for path in sorted(out.iterdir())
                if path.is_file()
            }

        assert run(tmp_path / "a") == run(tmp_path / "b")

    def test_review_flood_flags_run(self, tmp_path):
        texts, queries = _pipeline_inputs()
        judge = judge_with([(MED_PREFIX, lambda p: "garbage")])  # nothing else reached
        cfg = PipelineConfig(judge=judge, max_review_fraction=0.2)
        report = run_pipeline(texts, queries, cfg, tmp_path / "out")
        assert report.flagged

    def test_qc_report_files_written(self, tmp_path):
        texts, queries = _pipeline_inputs()
        judge = _pipeline_judge(med_labels={}, validated_docs={"t1"}, quality_scores={})
        run_pipeline(texts, queries, PipelineConfig(judge=judge), tmp_path / "out")
        payload = json.loads((tmp_path / "out" / "qc_report.json").read_text())
        assert "stages" in payload and "review_bucket" in payload
        assert (tmp_path / "out" / "qc_report.txt").read_text().startswith("benchmark construction")


class TestRawLoaders:
    def test_raw_queries_with_answers(self, tmp_path):
        path = tmp_path / "raw.jsonl"
        path.write_text(
            json.dumps({"_id": "q1", "text": "question", "answer": "ref answer"}) + "\n"
            + json.dumps({"_id": "q2", "text": "another"}) + "\n"
        )
        queries = load_raw_queries(path)
        assert queries[0].answer == "ref answer"
        assert queries[1].answer is None

    def test_raw_texts(self, tmp_path):
        path = tmp_path / "texts.jsonl"
        path.write_text(json.dumps({"_id": "t1", "text": "body"}) + "\n")
        assert load_raw_texts(path) == [("t1", "body")]

    def test_missing_files(self, tmp_path):
        with pytest.raises(ValidationError):
            load_raw_queries(tmp_path / "nope.jsonl")
        with pytest.raises(ValidationError):
            load_raw_texts(tmp_path / "nope.jsonl")


def test_pipeline_config_validation():
    judge = MockGeneratorClient()
    with pytest.raises(ValidationError):
        PipelineConfig(judge=judge, med_threshold=1.5)
    with pytest.raises(ValidationError):
        PipelineConfig(judge=judge, rel_threshold=-0.1)
    with pytest.raises(ValidationError):
        PipelineConfig(judge=judge, bm25_top_k=0)
