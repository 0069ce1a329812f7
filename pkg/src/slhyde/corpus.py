"""Dataset loading, validation, and sampling.

On-disk layout, one directory per dataset (all UTF-8):

    corpus.jsonl   one JSON object per line: _id, optional title, text
    queries.jsonl  one JSON object per line: _id, text
    qrels.tsv      optional header, then  query-id <TAB> corpus-id <TAB> score
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, ValidationError
from .util import atomic_write_text, jsonl_line

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    title: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("document id must be non-empty")
        if not self.text.strip():
            raise ValidationError(f"document {self.id!r} has empty text")

    @property
    def indexed_text(self) -> str:
        """Text used for indexing and embedding: title and body joined by a newline."""
        if self.title:
            return f"{self.title}\n{self.text}"
        return self.text


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValidationError("query id must be non-empty")
        if not self.text.strip():
            raise ValidationError(f"query {self.id!r} has empty text")


@dataclass
class RelevanceJudgments:
    """query-id -> (doc-id -> integer grade >= 0)."""

    entries: dict[str, dict[str, int]] = field(default_factory=dict)

    def grades_for(self, query_id: str) -> dict[str, int]:
        return self.entries.get(query_id, {})

    def judged_queries(self) -> list[str]:
        return list(self.entries)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


class CorpusStore:
    """Immutable ordered document collection with id lookup."""

    def __init__(self, documents: Iterable[Document]):
        self._documents: list[Document] = list(documents)
        self._by_id: dict[str, int] = {}
        for pos, doc in enumerate(self._documents):
            if doc.id in self._by_id:
                raise ValidationError(f"duplicate document id {doc.id!r}")
            self._by_id[doc.id] = pos

    def __len__(self) -> int:
        return len(self._documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._documents)

    def __getitem__(self, pos: int) -> Document:
        return self._documents[pos]

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self._documents]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        return self._documents[self.position(doc_id)]

    def position(self, doc_id: str) -> int:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise ValidationError(f"unknown document id {doc_id!r}") from None


def _iter_jsonl(path: Path):
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON in {path.name}: {exc.msg}", line=lineno) from None
            if not isinstance(record, dict):
                raise ParseError(f"expected a JSON object in {path.name}", line=lineno)
            yield lineno, record


def load_corpus(path: str | Path) -> CorpusStore:
    """Load corpus.jsonl into a CorpusStore. Duplicate _id values are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"corpus file not found: {path}")
    documents = []
    for lineno, record in _iter_jsonl(path):
        if "_id" not in record or "text" not in record:
            raise ParseError(f"record missing _id or text in {path.name}", line=lineno)
        try:
            documents.append(
                Document(
                    id=str(record["_id"]),
                    text=str(record["text"]),
                    title=str(record["title"]) if record.get("title") else None,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{exc} (line {lineno})") from None
    store = CorpusStore(documents)
    if not len(store):
        logger.warning("corpus file %s is empty", path)
    return store


def load_queries(path: str | Path) -> list[Query]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"queries file not found: {path}")
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        if "_id" not in record or "text" not in record:
            raise ParseError(f"record missing _id or text in {path.name}", line=lineno)
        try:
            query = Query(id=str(record["_id"]), text=str(record["text"]))
        except ValidationError as exc:
            raise ValidationError(f"{exc} (line {lineno})") from None
        if query.id in seen:
            raise ValidationError(f"duplicate query id {query.id!r} (line {lineno})")
        seen.add(query.id)
        queries.append(query)
    if not queries:
        logger.warning("queries file %s is empty", path)
    return queries


_QRELS_HEADERS = {"query-id", "query_id", "qid"}


def load_qrels(path: str | Path) -> RelevanceJudgments:
    """Load qrels.tsv. Duplicate (query, doc) pairs: last occurrence wins with a warning."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"qrels file not found: {path}")
    entries: dict[str, dict[str, int]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"expected 3 tab-separated columns, got {len(parts)} in {path.name}",
                    line=lineno,
                )
            qid, doc_id, grade_raw = (p.strip() for p in parts)
            if lineno == 1 and qid.lower() in _QRELS_HEADERS:
                continue
            try:
                grade = int(grade_raw)
            except ValueError:
                raise ParseError(
                    f"grade {grade_raw!r} is not an integer in {path.name}", line=lineno
                ) from None
            if grade < 0:
                raise ValidationError(f"negative grade {grade} for ({qid}, {doc_id}) (line {lineno})")
            if not qid or not doc_id:
                raise ParseError(f"empty query or doc id in {path.name}", line=lineno)
            per_query = entries.setdefault(qid, {})
            if doc_id in per_query:
                logger.warning(
                    "duplicate qrels pair (%s, %s) at line %d; last occurrence wins", qid, doc_id, lineno
                )
            per_query[doc_id] = grade
    for qid, grades in entries.items():
        if not any(g > 0 for g in grades.values()):
            logger.warning("query %s has no positive judgment; it will be skipped in evaluation", qid)
    return RelevanceJudgments(entries=entries)


def write_corpus(documents: Iterable[Document], path: str | Path) -> None:
    lines = []
    for doc in documents:
        record = {"_id": doc.id, "text": doc.text}
        if doc.title is not None:
            record["title"] = doc.title
        lines.append(jsonl_line(record))
    atomic_write_text(path, "".join(lines))


def write_queries(queries: Iterable[Query], path: str | Path) -> None:
    lines = [jsonl_line({"_id": q.id, "text": q.text}) for q in queries]
    atomic_write_text(path, "".join(lines))


def write_qrels(qrels: RelevanceJudgments, path: str | Path) -> None:
    lines = ["query-id\tcorpus-id\tscore\n"]
    for qid in qrels.entries:
        for doc_id, grade in qrels.entries[qid].items():
            lines.append(f"{qid}\t{doc_id}\t{grade}\n")
    atomic_write_text(path, "".join(lines))


def sample_documents(store: CorpusStore, n: int, seed: int) -> list[Document]:
    """Draw n distinct documents, deterministically for a fixed seed."""
    if n < 0:
        raise ValidationError("sample size must be non-negative")
    if n > len(store):
        raise ValidationError(f"cannot sample {n} documents from a corpus of {len(store)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(store))[:n]
    return [store[int(i)] for i in order]


def validate_dataset(store: CorpusStore, queries: list[Query], qrels: RelevanceJudgments) -> None:
    """Strict cross-file checks; raises on the first violation."""
    known_queries = {q.id for q in queries}
    for qid, grades in qrels.entries.items():
        if qid not in known_queries:
            raise ValidationError(f"qrels references unknown query id {qid!r}")
        for doc_id in grades:
            if doc_id not in store:
                raise ValidationError(f"qrels references unknown document id {doc_id!r}")
        if not any(g > 0 for g in grades.values()):
            raise ValidationError(f"query {qid!r} has no positive judgment")
