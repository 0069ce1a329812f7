import json
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slhyde.corpus import (
    CorpusStore,
    Document,
    Query,
    load_corpus,
    load_qrels,
    load_queries,
    sample_documents,
    validate_dataset,
    write_corpus,
    write_qrels,
    write_queries,
)
from slhyde.errors import ParseError, ValidationError

from conftest import synthetic_docs


def _write_jsonl(path, records):
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


class TestLoadCorpus:
    def test_three_valid_records(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_jsonl(path, [{"_id": f"d{i}", "text": f"text {i}"} for i in range(3)])
        store = load_corpus(path)
        assert len(store) == 3
        assert store.ids == ["d0", "d1", "d2"]

    def test_duplicate_id_names_the_id(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_jsonl(path, [{"_id": "dup", "text": "a"}, {"_id": "dup", "text": "b"}])
        with pytest.raises(ValidationError, match="dup"):
            load_corpus(path)

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "corpus.jsonl"
        path.write_text("")
        with caplog.at_level(logging.WARNING):
            store = load_corpus(path)
        assert len(store) == 0
        assert any("empty" in record.message for record in caplog.records)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text('{"_id": "d0", "text": "ok"}\nnot json\n')
        with pytest.raises(ParseError, match="line 2"):
            load_corpus(path)

    def test_missing_field_is_parse_error(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_jsonl(path, [{"_id": "d0"}])
        with pytest.raises(ParseError):
            load_corpus(path)

    def test_title_feeds_indexed_text(self):
        doc = Document(id="d", text="body", title="heading")
        assert doc.indexed_text == "heading\nbody"
        assert Document(id="d", text="body").indexed_text == "body"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_corpus(tmp_path / "nope.jsonl")


class TestLoadQueries:
    def test_five_lines(self, tmp_path):
        path = tmp_path / "queries.jsonl"
        _write_jsonl(path, [{"_id": f"q{i}", "text": f"question {i}"} for i in range(5)])
        assert len(load_queries(path)) == 5

    def test_blank_text_rejected(self, tmp_path):
        path = tmp_path / "queries.jsonl"
        _write_jsonl(path, [{"_id": "q0", "text": "   "}])
        with pytest.raises(ValidationError):
            load_queries(path)

    def test_unicode_ids_round_trip(self, tmp_path):
        path = tmp_path / "queries.jsonl"
        records = [{"_id": "查询-1", "text": "高血压怎么治疗"}, {"_id": "q-ß", "text": "unicode täxt"}]
        _write_jsonl(path, records)
        queries = load_queries(path)
        assert [q.id for q in queries] == ["查询-1", "q-ß"]
        out = tmp_path / "roundtrip.jsonl"
        write_queries(queries, out)
        assert [q.id for q in load_queries(out)] == ["查询-1", "q-ß"]

    def test_duplicate_query_id(self, tmp_path):
        path = tmp_path / "queries.jsonl"
        _write_jsonl(path, [{"_id": "q", "text": "a"}, {"_id": "q", "text": "b"}])
        with pytest.raises(ValidationError, match="q"):
            load_queries(path)


class TestLoadQrels:
    def test_single_line(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t1\n")
        qrels = load_qrels(path)
        assert qrels.entries == {"q1": {"d1": 1}}

    def test_negative_grade_rejected(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t-1\n")
        with pytest.raises(ValidationError):
            load_qrels(path)

    def test_duplicate_pair_last_wins_with_warning(self, tmp_path, caplog):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t1\nq1\td1\t2\n")
        with caplog.at_level(logging.WARNING):
            qrels = load_qrels(path)
        assert qrels.entries["q1"]["d1"] == 2
        assert any("duplicate" in record.message for record in caplog.records)

    def test_header_is_skipped(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("query-id\tcorpus-id\tscore\nq1\td1\t1\n")
        assert load_qrels(path).entries == {"q1": {"d1": 1}}

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t1\textra\n")
        with pytest.raises(ParseError, match="columns"):
            load_qrels(path)

    def test_no_positive_judgment_warns(self, tmp_path, caplog):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t0\n")
        with caplog.at_level(logging.WARNING):
            load_qrels(path)
        assert any("no positive" in record.message for record in caplog.records)


class TestSampleDocuments:
    def test_full_sample_is_shuffled_permutation(self):
        store = CorpusStore(synthetic_docs(50, seed=3))
        sample = sample_documents(store, 50, seed=11)
        assert sorted(d.id for d in sample) == sorted(store.ids)
        assert [d.id for d in sample] != store.ids

    def test_same_seed_is_deterministic(self):
        store = CorpusStore(synthetic_docs(40, seed=3))
        first = [d.id for d in sample_documents(store, 10, seed=5)]
        second = [d.id for d in sample_documents(store, 10, seed=5)]
        assert first == second

    def test_100_from_10000_all_distinct(self):
        docs = [Document(id=f"d{i}", text=f"text {i}") for i in range(10_000)]
        store = CorpusStore(docs)
        sample = sample_documents(store, 100, seed=0)
        # set-size oracle: distinctness means the id set has full cardinality
        assert len({d.id for d in sample}) == 100

    def test_oversample_rejected(self):
        store = CorpusStore(synthetic_docs(5))
        with pytest.raises(ValidationError):
            sample_documents(store, 6, seed=0)

    @given(st.integers(min_value=0, max_value=30), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_sample_ids_subset_and_distinct(self, n, seed):
        store = CorpusStore(synthetic_docs(30, seed=1))
        sample = sample_documents(store, n, seed=seed)
        ids = [d.id for d in sample]
        assert len(set(ids)) == len(ids) == n
        assert set(ids) <= set(store.ids)


class TestRoundTrip:
    def test_corpus_round_trip_field_equality(self, tmp_path):
        docs = [
            Document(id="d1", text="plain"),
            Document(id="d2", text="body", title="titled"),
            Document(id="d中", text="中文内容"),
        ]
        path = tmp_path / "corpus.jsonl"
        write_corpus(docs, path)
        loaded = list(load_corpus(path))
        assert loaded == docs

    def test_qrels_round_trip(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t2\nq1\td2\t0\nq2\td3\t1\n")
        qrels = load_qrels(path)
        out = tmp_path / "out.tsv"
        write_qrels(qrels, out)
        assert load_qrels(out).entries == qrels.entries

    @given(
        st.lists(
            st.tuples(
                st.text(alphabet=st.characters(exclude_characters="\n\r", exclude_categories=("Cs",)), min_size=1, max_size=20),
                st.text(alphabet=st.characters(exclude_characters="\n\r", exclude_categories=("Cs",)), min_size=1, max_size=60).filter(lambda s: s.strip()),
            ),
            min_size=1,
            max_size=20,
            unique_by=lambda pair: pair[0],
        )
    )
    @settings(max_examples=30, deadline=None)
    def test_generated_corpus_round_trips(self, tmp_path_factory, records):
        docs = [Document(id=i, text=t) for i, t in records]
        path = tmp_path_factory.mktemp("rt") / "corpus.jsonl"
        write_corpus(docs, path)
        assert list(load_corpus(path)) == docs


def test_validate_dataset_cross_checks():
    docs = synthetic_docs(3)
    store = CorpusStore(docs)
    queries = [Query(id="q1", text="hello")]
    from slhyde.corpus import RelevanceJudgments

    good = RelevanceJudgments(entries={"q1": {docs[0].id: 1}})
    validate_dataset(store, queries, good)

    with pytest.raises(ValidationError, match="unknown query"):
        validate_dataset(store, queries, RelevanceJudgments(entries={"qX": {docs[0].id: 1}}))
    with pytest.raises(ValidationError, match="unknown document"):
        validate_dataset(store, queries, RelevanceJudgments(entries={"q1": {"nope": 1}}))
    with pytest.raises(ValidationError, match="no positive"):
        validate_dataset(store, queries, RelevanceJudgments(entries={"q1": {docs[0].id: 0}}))
