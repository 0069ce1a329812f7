"""LLM-judged benchmark construction.

Three stages over raw texts and raw queries:
  1. medical-relevance filtering of both sides,
  2. positive-pair matching per query: BM25 top-k, judge rerank to top-m,
     evidence extraction, answer generation from evidence only, and answer
     validation (against the reference answer when the query carries one,
     against the document otherwise),
  3. query-document relevance filtering of the surviving pairs.

Judges must answer in JSON. An unparseable response gets exactly one repair
retry (the prompt re-asked with a format reminder); failing that, the item
goes to the review bucket instead of being dropped silently. Every kept or
removed decision carries the judge rationale, and each stage's counts
satisfy kept + removed + review = input.

Outputs use the standard dataset layout (corpus.jsonl / queries.jsonl /
qrels.tsv) plus a QC report in JSON and text form.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .bm25 import Bm25Index, bm25_search
from .corpus import CorpusStore, Document, Query, RelevanceJudgments, write_corpus, write_qrels, write_queries
from .errors import SlhydeError, ValidationError
from .textgen import SamplingConfig, generate, load_template, render_prompt
from .util import atomic_write_text, dump_json

logger = logging.getLogger(__name__)

_JSON_BLOCK_RE = re.compile(r"\{.*\}", re.DOTALL)
_REPAIR_SUFFIX = "\n\nYour previous output was not valid JSON. Return ONLY a valid JSON object with the required keys."


@dataclass(frozen=True)
class RawQuery:
    id: str
    text: str
    answer: str | None = None  # reference answer for QA-style validation


@dataclass
class JudgedText:
    text_id: str
    med_score: float
    rationale: str


@dataclass
class CandidatePair:
    query_id: str
    doc_id: str
    query_text: str
    doc_text: str
    evidence_spans: list[str]
    generated_answer: str
    validated: bool
    rel_score: float | None = None

    def __post_init__(self):
        if self.validated and not self.evidence_spans:
            raise ValidationError("a validated pair must carry evidence spans")


@dataclass
class ReviewItem:
    stage: str
    item_id: str
    reason: str
    raw_response: str = ""


@dataclass
class PipelineConfig:
    judge: object
    med_threshold: float = 0.5
    rel_threshold: float = 0.6
    bm25_top_k: int = 20
    rerank_top_m: int = 3
    max_review_fraction: float = 0.25
    bm25_k1: float = 0.9
    bm25_b: float = 0.4
    bm25_tokenizer: str = "cjk"
    sampling: SamplingConfig = field(
        default_factory=lambda: SamplingConfig(temperature=0.0, num_samples=1)
    )

    def __post_init__(self):
        for name in ("med_threshold", "rel_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        if self.bm25_top_k < 1 or self.rerank_top_m < 1:
            raise ValidationError("bm25_top_k and rerank_top_m must be >= 1")


def _parse_json_response(text: str) -> dict | None:
    """Extract the first JSON object from a judge response, tolerating code fences."""
    cleaned = text.strip()
    if cleaned.startswith("```"):
        cleaned = re.sub(r"^```[a-zA-Z]*\s*", "", cleaned)
        cleaned = re.sub(r"\s*```$", "", cleaned)
    match = _JSON_BLOCK_RE.search(cleaned)
    if not match:
        return None
    try:
        parsed = json.loads(match.group(0))
    except json.JSONDecodeError:
        return None
    return parsed if isinstance(parsed, dict) else None


def _ask_judge(judge, prompt: str, accept, sampling: SamplingConfig):
    """One judge call with a single repair retry.

    `accept` is either a tuple of required keys or a predicate over the parsed
    dict. Returns (dict, raw) on success, (None, raw) when the response stays
    unusable after the repair attempt.
    """
    if isinstance(accept, tuple):
        required = accept
        accept = lambda parsed: all(key in parsed for key in required)  # noqa: E731
    raw = ""
    try:
        raw = generate(judge, prompt, sampling)[0]
    except SlhydeError as exc:
        return None, f"<judge call failed: {exc}>"
    parsed = _parse_json_response(raw)
    if parsed is not None and accept(parsed):
        return parsed, raw
    try:
        raw_retry = generate(judge, prompt + _REPAIR_SUFFIX, sampling)[0]
    except SlhydeError as exc:
        return None, f"{raw!r}; repair failed: {exc}"
    parsed = _parse_json_response(raw_retry)
    if parsed is not None and accept(parsed):
        return parsed, raw_retry
    return None, raw_retry


def _med_score(parsed: dict) -> float | None:
    if "label" in parsed:
        try:
            return float(int(parsed["label"]))
        except (TypeError, ValueError):
            return None
    if "score" in parsed:
        try:
            return float(parsed["score"])
        except (TypeError, ValueError):
            return None
    return None


def medical_relevance_filter(
    items,
    judge,
    threshold: float,
    sampling: SamplingConfig | None = None,
    stage: str = "medical_filter",
):
    """Split (id, text[, answer]) items into (kept, removed, review).

    Keeps items whose judged score is >= threshold (boundary keeps). Items
    whose judge output stays unparseable after one repair retry land in the
    review bucket rather than being dropped.
    """
    sampling = sampling or SamplingConfig(temperature=0.0, num_samples=1)
    template = load_template("MED_RELEVANCE")
    kept: list[JudgedText] = []
    removed: list[JudgedText] = []
    review: list[ReviewItem] = []
    for item in items:
        item_id, text = item[0], item[1]
        answer = item[2] if len(item) > 2 and item[2] is not None else ""
        prompt = render_prompt(template, {"QUESTION": text, "ANSWER": answer})
        parsed, raw = _ask_judge(judge, prompt, lambda p: _med_score(p) is not None, sampling)
        score = _med_score(parsed) if parsed is not None else None
        if score is None:
            review.append(
                ReviewItem(stage=stage, item_id=item_id, reason="unparseable judge verdict", raw_response=raw)
            )
            continue
        judged = JudgedText(
            text_id=item_id,
            med_score=max(0.0, min(1.0, score)),
            rationale=str(parsed.get("reason", "")),
        )
        (kept if judged.med_score >= threshold else removed).append(judged)
    return kept, removed, review


def _format_passages(hits, store: CorpusStore) -> str:
    lines = []
    for number, (doc_id, _) in enumerate(hits, start=1):
        lines.append(f"[{number}] {store.get(doc_id).indexed_text}")
    return "\n".join(lines)


def match_positive_pairs(
    query: RawQuery,
    bm25: Bm25Index,
    judge,
    cfg: PipelineConfig,
    store: CorpusStore,
    review: list[ReviewItem] | None = None,
) -> list[CandidatePair]:
    """Run the retrieve / rerank / evidence / answer / validate chain for one query.

    Only validated pairs are returned; pairs with empty evidence are rejected
    outright, and judge failures route the query or pair to the review bucket.
    """
    review = review if review is not None else []
    hits = bm25_search(bm25, query.text, cfg.bm25_top_k)
    if not hits.hits:
        return []

    rerank_prompt = render_prompt(
        load_template("RERANK"),
        {"QUESTION": query.text, "PASSAGES": _format_passages(hits, store)},
    )
    parsed, raw = _ask_judge(judge, rerank_prompt, ("ranking",), cfg.sampling)
    if parsed is None or not isinstance(parsed.get("ranking"), list):
        review.append(
            ReviewItem(stage="rerank", item_id=query.id, reason="unparseable rerank verdict", raw_response=raw)
        )
        return []
    candidates: list[str] = []
    for number in parsed["ranking"]:
        try:
            index = int(number) - 1
        except (TypeError, ValueError):
            continue
        if 0 <= index < len(hits.hits):
            doc_id = hits.hits[index][0]
            if doc_id not in candidates:
                candidates.append(doc_id)
        if len(candidates) == cfg.rerank_top_m:
            break

    pairs: list[CandidatePair] = []
    for doc_id in candidates:
        doc = store.get(doc_id)
        evidence_prompt = render_prompt(
            load_template("EVIDENCE"),
            {"QUESTION": query.text, "ANSWER": query.answer or "", "DOCUMENT": doc.indexed_text},
        )
        parsed, raw = _ask_judge(judge, evidence_prompt, ("evidence_spans",), cfg.sampling)
        if parsed is None or not isinstance(parsed.get("evidence_spans"), list):
            review.append(
                ReviewItem(
                    stage="evidence", item_id=f"{query.id}:{doc_id}",
                    reason="unparseable evidence verdict", raw_response=raw,
                )
            )
            continue
        spans = [str(s) for s in parsed["evidence_spans"] if str(s).strip()]
        if not spans:
            continue  # empty evidence rejects the pair

        answer_prompt = render_prompt(
            load_template("ANSWER_BY_EVIDENCE"),
            {"QUESTION": query.text, "EVIDENCE": json.dumps(spans, ensure_ascii=False)},
        )
        parsed, raw = _ask_judge(judge, answer_prompt, ("answer",), cfg.sampling)
        if parsed is None:
            review.append(
                ReviewItem(
                    stage="answer", item_id=f"{query.id}:{doc_id}",
                    reason="unparseable answer", raw_response=raw,
                )
            )
            continue
        generated = str(parsed["answer"])

        reference = query.answer if query.answer else doc.indexed_text
        validate_prompt = render_prompt(
            load_template("VALIDATE_ANSWER"),
            {"QUESTION": query.text, "REFERENCE_ANSWER": reference, "MODEL_ANSWER": generated},
        )
        parsed, raw = _ask_judge(judge, validate_prompt, ("similarity_score",), cfg.sampling)
        if parsed is None:
            review.append(
                ReviewItem(
                    stage="validate", item_id=f"{query.id}:{doc_id}",
                    reason="unparseable validation verdict", raw_response=raw,
                )
            )
            continue
        try:
            similarity = float(parsed["similarity_score"])
        except (TypeError, ValueError):
            review.append(
                ReviewItem(
                    stage="validate", item_id=f"{query.id}:{doc_id}",
                    reason="non-numeric similarity score", raw_response=raw,
                )
            )
            continue
        if similarity >= cfg.rel_threshold:
            pairs.append(
                CandidatePair(
                    query_id=query.id,
                    doc_id=doc_id,
                    query_text=query.text,
                    doc_text=doc.indexed_text,
                    evidence_spans=spans,
                    generated_answer=generated,
                    validated=True,
                )
            )
    return pairs


def filter_pseudo_relevant(
    pairs: list[CandidatePair],
    judge,
    threshold: float,
    sampling: SamplingConfig | None = None,
    review: list[ReviewItem] | None = None,
) -> list[CandidatePair]:
    """Keep pairs whose judged 1-5 quality score, normalized to [0,1], is >= threshold."""
    sampling = sampling or SamplingConfig(temperature=0.0, num_samples=1)
    review = review if review is not None else []
    template = load_template("QD_RELEVANCE")
    kept = []
    for pair in pairs:
        prompt = render_prompt(template, {"QUERY": pair.query_text, "PASSAGE": pair.doc_text})
        parsed, raw = _ask_judge(judge, prompt, ("quality_score",), sampling)
        if parsed is None:
            review.append(
                ReviewItem(
                    stage="relevance_filter", item_id=f"{pair.query_id}:{pair.doc_id}",
                    reason="unparseable quality verdict", raw_response=raw,
                )
            )
            continue
        try:
            quality = int(parsed["quality_score"])
        except (TypeError, ValueError):
            review.append(
                ReviewItem(
                    stage="relevance_filter", item_id=f"{pair.query_id}:{pair.doc_id}",
                    reason="non-integer quality score", raw_response=raw,
                )
            )
            continue
        pair.rel_score = quality / 5.0
        if pair.rel_score >= threshold:
            kept.append(pair)
    return kept


@dataclass
class QcReport:
    stages: dict[str, dict] = field(default_factory=dict)
    review: list[ReviewItem] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "review_bucket": [
                {"stage": r.stage, "item_id": r.item_id, "reason": r.reason, "raw_response": r.raw_response}
                for r in self.review
            ],
            "warnings": self.warnings,
            "flagged": self.flagged,
        }

    def render_text(self) -> str:
        lines = ["benchmark construction QC report", ""]
        for stage, counts in self.stages.items():
            parts = ", ".join(f"{key}={value}" for key, value in counts.items() if not isinstance(value, list))
            lines.append(f"{stage}: {parts}")
        lines.append(f"review bucket: {len(self.review)} item(s)")
        for warning in self.warnings:
            lines.append(f"WARNING: {warning}")
        lines.append(f"flagged: {self.flagged}")
        return "\n".join(lines) + "\n"


def run_pipeline(
    texts: list[tuple[str, str]],
    queries: list[RawQuery],
    cfg: PipelineConfig,
    out_dir: str | Path,
) -> QcReport:
    """Full construction pipeline; emits the dataset files plus the QC report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = QcReport()

    kept_texts, removed_texts, review_texts = medical_relevance_filter(
        texts, cfg.judge, cfg.med_threshold, cfg.sampling, stage="medical_filter_texts"
    )
    report.review.extend(review_texts)
    report.stages["1_medical_filter_texts"] = _stage_counts(
        len(texts), kept_texts, removed_texts, review_texts
    )

    query_items = [(q.id, q.text, q.answer) for q in queries]
    kept_query_judged, removed_queries, review_queries = medical_relevance_filter(
        query_items, cfg.judge, cfg.med_threshold, cfg.sampling, stage="medical_filter_queries"
    )
    report.review.extend(review_queries)
    report.stages["1_medical_filter_queries"] = _stage_counts(
        len(queries), kept_query_judged, removed_queries, review_queries
    )

    text_by_id = dict(texts)
    kept_docs = [Document(id=j.text_id, text=text_by_id[j.text_id]) for j in kept_texts]
    store = CorpusStore(kept_docs)
    kept_query_ids = {j.text_id for j in kept_query_judged}
    kept_queries = [q for q in queries if q.id in kept_query_ids]

    matched: list[CandidatePair] = []
    match_review: list[ReviewItem] = []
    no_evidence_or_invalid = 0
    if len(store):
        bm25 = Bm25Index.build(store, k1=cfg.bm25_k1, b=cfg.bm25_b, tokenizer=cfg.bm25_tokenizer)
        for query in kept_queries:
            pairs = match_positive_pairs(query, bm25, cfg.judge, cfg, store, match_review)
            if not pairs:
                no_evidence_or_invalid += 1
            matched.extend(pairs)
    report.review.extend(match_review)
    report.stages["2_pair_matching"] = {
        "input_queries": len(kept_queries),
        "pairs_validated": len(matched),
        "queries_without_pairs": no_evidence_or_invalid,
        "review": len(match_review),
    }

    filter_review: list[ReviewItem] = []
    final_pairs = filter_pseudo_relevant(
        matched, cfg.judge, cfg.rel_threshold, cfg.sampling, filter_review
    )
    report.review.extend(filter_review)
    report.stages["3_relevance_filter"] = {
        "input": len(matched),
        "kept": len(final_pairs),
        "removed": len(matched) - len(final_pairs) - len(filter_review),
        "review": len(filter_review),
    }

    qrels = RelevanceJudgments()
    for pair in final_pairs:
        qrels.entries.setdefault(pair.query_id, {})[pair.doc_id] = 1
    final_query_ids = set(qrels.entries)
    final_queries = [Query(id=q.id, text=q.text) for q in kept_queries if q.id in final_query_ids]

    write_corpus(list(store), out_dir / "corpus.jsonl")
    write_queries(final_queries, out_dir / "queries.jsonl")
    write_qrels(qrels, out_dir / "qrels.tsv")

    if not final_pairs:
        message = "pipeline produced ZERO validated query-document pairs; dataset is empty"
        logger.warning(message)
        report.warnings.append(message)

    total_inputs = len(texts) + len(queries)
    if total_inputs and len(report.review) / total_inputs > cfg.max_review_fraction:
        report.flagged = True
        report.warnings.append(
            f"review bucket holds {len(report.review)}/{total_inputs} items; run flagged"
        )
    for stage, counts in report.stages.items():
        stage_input = counts.get("input", counts.get("input_queries", 0))
        if stage_input and counts.get("review", 0) / stage_input > cfg.max_review_fraction:
            report.flagged = True

    atomic_write_text(out_dir / "qc_report.json", dump_json(report.to_dict()))
    atomic_write_text(out_dir / "qc_report.txt", report.render_text())
    return report


def _stage_counts(total: int, kept, removed, review) -> dict:
    return {
        "input": total,
        "kept": len(kept),
        "removed": len(removed),
        "review": len(review),
        "removed_items": [
            {"id": j.text_id, "med_score": j.med_score, "reason": j.rationale} for j in removed
        ],
    }


def load_raw_queries(path: str | Path) -> list[RawQuery]:
    """Raw query JSONL: _id, text, optional answer (reference answer)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"raw queries file not found: {path}")
    queries = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "_id" not in record or "text" not in record:
                raise ValidationError(f"raw query missing _id or text (line {lineno})")
            queries.append(
                RawQuery(
                    id=str(record["_id"]),
                    text=str(record["text"]),
                    answer=str(record["answer"]) if record.get("answer") else None,
                )
            )
    return queries


def load_raw_texts(path: str | Path) -> list[tuple[str, str]]:
    """Raw text JSONL: _id, text."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"raw texts file not found: {path}")
    texts = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "_id" not in record or "text" not in record:
                raise ValidationError(f"raw text missing _id or text (line {lineno})")
            texts.append((str(record["_id"]), str(record["text"])))
    return texts
