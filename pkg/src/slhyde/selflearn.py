"""Label-free training-data construction and reference loss evaluation.

Two datasets come out of this module:
  - the generator SFT set: for each corpus document, synthesize a query,
    generate several candidate pseudo-documents, score each candidate by the
    full-corpus rank it gives the true document, and keep the best candidate;
  - the retriever triplet set: (query, pseudo-document; positive) triples
    with hard negatives mined from the corpus around the fused
    (query, pseudo) embedding.

Gradient-based training is out of scope; the module emits the datasets and
computes reference InfoNCE loss values on given embeddings.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .ann import AnnIndex, ann_search
from .corpus import Document
from .embed import embed_text
from .errors import RunError, SlhydeError, ValidationError
from .retrieval import DenseIndex, rank_of
from .textgen import SamplingConfig, generate_pseudo_docs, generate_query_for_doc
from .util import atomic_write_text, derive_seed, jsonl_line

logger = logging.getLogger(__name__)

# Instruction the emitted SFT records carry; matches the inference-time task
# so the tuned generator sees the same framing in training and deployment.
DEFAULT_SFT_INSTRUCTION = "Please generate a medical content paragraph to answer this question."


@dataclass(frozen=True)
class HypotheticalCandidate:
    text: str
    rank: int  # 1-based full-corpus rank of the true target under this candidate

    def __post_init__(self):
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")


@dataclass(frozen=True)
class SftExample:
    query: str
    response: str          # the selected best candidate
    doc_id: str            # source document
    rank: int              # rank the selected candidate achieved
    num_candidates: int    # how many candidates were scored


@dataclass(frozen=True, eq=True)
class RetrieverTriplet:
    query: str
    pseudo: str
    positive: str
    negatives: tuple[str, ...]
    # participates in equality (round-trip tests cover it); triplets are never hashed
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.positive in self.negatives:
            raise ValidationError("positive document listed among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValidationError("negatives must be distinct")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.02
    include_in_batch: bool = False
    batch: tuple = ()

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError("tau must be > 0")


@dataclass
class SftBuildResult:
    examples: list[SftExample]
    total: int = 0
    dropped_by_cutoff: int = 0
    skipped_errors: int = 0


def score_candidates(
    candidates: list[str],
    query_vec: np.ndarray,
    emb,
    index: DenseIndex,
    target_id: str,
    rank_scoring: str = "candidate",
) -> list[HypotheticalCandidate]:
    """Rank the true target under each candidate's retrieval vector.

    rank_scoring="candidate" retrieves with the candidate embedding alone
    (the literal reading); "fused" averages in the query embedding, matching
    the inference-time fusion. Both are exposed because the source procedure
    is ambiguous on this point.
    """
    if rank_scoring not in ("candidate", "fused"):
        raise ValidationError(f"unknown rank_scoring {rank_scoring!r}")
    scored = []
    for text in candidates:
        vec = embed_text(emb, text)
        if rank_scoring == "fused":
            vec = (vec + query_vec) / 2.0
        scored.append(HypotheticalCandidate(text=text, rank=rank_of(index, vec, target_id)))
    return scored


def select_best(candidates: list[HypotheticalCandidate]) -> tuple[int, HypotheticalCandidate]:
    """Argmin over candidate ranks; ties go to the lowest candidate index."""
    if not candidates:
        raise ValidationError("no candidates to select from")
    best_index = min(range(len(candidates)), key=lambda i: candidates[i].rank)
    return best_index, candidates[best_index]


def build_generator_dataset(
    docs: list[Document],
    gen,
    emb,
    index: DenseIndex,
    candidates_per_doc: int = 5,
    seed: int = 0,
    rank_cutoff: int = 100,
    rank_scoring: str = "candidate",
    max_skip_fraction: float = 0.5,
    sampling: SamplingConfig | None = None,
    parallelism: int = 1,
) -> SftBuildResult:
    """Construct the generator SFT dataset from unlabeled documents.

    Per-document generation or embedding errors skip the document; a skip
    rate above `max_skip_fraction` fails the run. Documents whose best
    candidate rank exceeds `rank_cutoff` are dropped and counted.
    """
    if candidates_per_doc < 1:
        raise ValidationError("candidates_per_doc must be >= 1")
    base = sampling or SamplingConfig()

    def _one(doc: Document) -> SftExample | None:
        query_cfg = SamplingConfig(
            temperature=base.temperature,
            max_output_tokens=base.max_output_tokens,
            seed=derive_seed(seed, "query", doc.id),
        )
        cand_cfg = SamplingConfig(
            temperature=base.temperature,
            max_output_tokens=base.max_output_tokens,
            seed=derive_seed(seed, "candidates", doc.id),
        )
        query = generate_query_for_doc(gen, doc, query_cfg)
        candidate_texts = generate_pseudo_docs(gen, query, doc, candidates_per_doc, cand_cfg)
        query_vec = embed_text(emb, query)
        scored = score_candidates(candidate_texts, query_vec, emb, index, doc.id, rank_scoring)
        best_index, best = select_best(scored)
        return SftExample(
            query=query,
            response=candidate_texts[best_index],
            doc_id=doc.id,
            rank=best.rank,
            num_candidates=candidates_per_doc,
        )

    examples: list[SftExample] = []
    dropped = 0
    skipped = 0

    def _safe(doc: Document):
        try:
            return _one(doc)
        except SlhydeError as exc:
            logger.warning("skipping document %s: %s", doc.id, exc)
            return None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_safe, docs))
    else:
        results = [_safe(doc) for doc in docs]

    for result in results:
        if result is None:
            skipped += 1
        elif result.rank > rank_cutoff:
            dropped += 1
        else:
            examples.append(result)

    if docs and skipped / len(docs) > max_skip_fraction:
        raise RunError(
            f"{skipped}/{len(docs)} documents failed; exceeds allowed fraction {max_skip_fraction}"
        )
    if dropped:
        logger.info("dropped %d documents whose best rank exceeded %d", dropped, rank_cutoff)
    return SftBuildResult(
        examples=examples, total=len(docs), dropped_by_cutoff=dropped, skipped_errors=skipped
    )


def mine_hard_negatives(
    query_text: str,
    pseudo_text: str,
    positive: str,
    emb,
    ann: AnnIndex,
    m: int = 7,
    breadth: int | None = None,
) -> list[tuple[str, float]]:
    """The m corpus documents nearest the fused (query, pseudo) embedding, positive excluded."""
    if m < 1:
        raise ValidationError("m must be >= 1")
    if len(ann) <= m:
        raise ValidationError(f"corpus of {len(ann)} is too small to mine {m} negatives")
    query_vec = embed_text(emb, query_text)
    pseudo_vec = embed_text(emb, pseudo_text)
    fused = (query_vec + pseudo_vec) / 2.0
    hits = ann_search(ann, fused, k=m + 1, breadth=breadth)
    negatives = [(doc_id, score) for doc_id, score in hits if doc_id != positive][:m]
    if len(negatives) < m:
        # Approximate search came back short; widen to the exact path.
        hits = ann_search(ann, fused, k=m + 1, breadth=len(ann))
        negatives = [(doc_id, score) for doc_id, score in hits if doc_id != positive][:m]
    return negatives


def build_retriever_dataset(
    sft_examples: list[SftExample],
    gen,
    emb,
    ann: AnnIndex,
    m: int = 7,
    reuse_pseudo: bool = True,
    template: str = "Q2P",
    seed: int = 0,
    sampling: SamplingConfig | None = None,
    breadth: int | None = None,
    parallelism: int = 1,
) -> list[RetrieverTriplet]:
    """One triplet per SFT example.

    With reuse_pseudo (offline mode) the selected response is reused as the
    pseudo-document; otherwise the generator rewrites the query fresh, which
    is the deployment-form path for a tuned generator.
    """
    from .textgen import generate_hypothetical  # local import to keep module load light

    base = sampling or SamplingConfig()

    def _one(example: SftExample) -> RetrieverTriplet:
        if reuse_pseudo:
            pseudo = example.response
        else:
            cfg = SamplingConfig(
                temperature=base.temperature,
                max_output_tokens=base.max_output_tokens,
                seed=derive_seed(seed, "pseudo", example.doc_id),
            )
            pseudo = generate_hypothetical(gen, example.query, template, 1, cfg)[0]
        negatives = mine_hard_negatives(
            example.query, pseudo, example.doc_id, emb, ann, m=m, breadth=breadth
        )
        return RetrieverTriplet(
            query=example.query,
            pseudo=pseudo,
            positive=example.doc_id,
            negatives=tuple(doc_id for doc_id, _ in negatives),
            scores={doc_id: score for doc_id, score in negatives},
        )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(_one, sft_examples))
    return [_one(example) for example in sft_examples]


def infonce_from_scores(
    positive_score: float,
    negative_scores,
    cfg: LossConfig,
    batch_scores=(),
) -> float:
    """InfoNCE over raw similarity scores at temperature cfg.tau (log-sum-exp stable)."""
    if cfg.tau <= 0:
        raise ValidationError("tau must be > 0")
    logits = [positive_score / cfg.tau]
    logits.extend(s / cfg.tau for s in negative_scores)
    if cfg.include_in_batch:
        logits.extend(s / cfg.tau for s in batch_scores)
    logits = np.asarray(logits, dtype=np.float64)
    peak = float(np.max(logits))
    lse = peak + float(np.log(np.sum(np.exp(logits - peak))))
    return float(lse - logits[0])


def contrastive_loss(
    query_fused: np.ndarray,
    positive: np.ndarray,
    negatives,
    cfg: LossConfig,
) -> float:
    """InfoNCE on vectors: scores are inner products of the fused query vector
    with (unit-normalized) document vectors; in-batch candidates come from cfg.batch."""
    q = np.asarray(query_fused, dtype=np.float64).ravel()
    pos = np.asarray(positive, dtype=np.float64).ravel()
    if pos.shape != q.shape:
        raise ValidationError("positive vector dim mismatch")
    neg_scores = []
    for vec in negatives:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape != q.shape:
            raise ValidationError("negative vector dim mismatch")
        neg_scores.append(float(q @ vec))
    batch_scores = []
    if cfg.include_in_batch:
        for vec in cfg.batch:
            vec = np.asarray(vec, dtype=np.float64).ravel()
            if vec.shape != q.shape:
                raise ValidationError("batch vector dim mismatch")
            batch_scores.append(float(q @ vec))
    return infonce_from_scores(float(q @ pos), neg_scores, cfg, batch_scores)


def dataset_reference_loss(
    triplets: list[RetrieverTriplet],
    emb,
    cache,
    cfg: LossConfig | None = None,
) -> list[float]:
    """Reference InfoNCE per triplet, with the fused (query, pseudo) vector as the query side."""
    cfg = cfg or LossConfig()
    losses = []
    for triplet in triplets:
        query_vec = embed_text(emb, triplet.query)
        pseudo_vec = embed_text(emb, triplet.pseudo)
        fused = (query_vec + pseudo_vec) / 2.0
        positive = cache.row(triplet.positive)
        negatives = [cache.row(doc_id) for doc_id in triplet.negatives]
        losses.append(contrastive_loss(fused, positive, negatives, cfg))
    return losses


# --- JSONL emission -------------------------------------------------------
# Record schemas are part of the external interface: they are what external
# fine-tuning harnesses consume.

SFT_RECORD_SCHEMA = {
    "type": "object",
    "required": ["instruction", "input", "output", "meta"],
    "additionalProperties": False,
    "properties": {
        "instruction": {"type": "string"},
        "input": {"type": "string", "minLength": 1},
        "output": {"type": "string", "minLength": 1},
        "meta": {
            "type": "object",
            "required": ["doc_id", "rank", "L"],
            "additionalProperties": False,
            "properties": {
                "doc_id": {"type": "string", "minLength": 1},
                "rank": {"type": "integer", "minimum": 1},
                "L": {"type": "integer", "minimum": 1},
            },
        },
    },
}

TRIPLET_RECORD_SCHEMA = {
    "type": "object",
    "required": ["query", "pseudo", "pos", "neg", "meta"],
    "additionalProperties": False,
    "properties": {
        "query": {"type": "string", "minLength": 1},
        "pseudo": {"type": "string", "minLength": 1},
        "pos": {"type": "string", "minLength": 1},
        "neg": {
            "type": "array",
            "items": {"type": "string", "minLength": 1},
            "uniqueItems": True,
        },
        "meta": {"type": "object"},
    },
}


def emit_sft_jsonl(
    examples: list[SftExample],
    path: str | Path,
    instruction: str = DEFAULT_SFT_INSTRUCTION,
) -> None:
    lines = []
    for example in examples:
        lines.append(
            jsonl_line(
                {
                    "instruction": instruction,
                    "input": example.query,
                    "output": example.response,
                    "meta": {
                        "doc_id": example.doc_id,
                        "rank": example.rank,
                        "L": example.num_candidates,
                    },
                }
            )
        )
    atomic_write_text(path, "".join(lines))


def load_sft_jsonl(path: str | Path) -> list[SftExample]:
    examples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            try:
                jsonschema.validate(record, SFT_RECORD_SCHEMA)
            except jsonschema.ValidationError as exc:
                raise ValidationError(f"bad SFT record at line {lineno}: {exc.message}") from None
            examples.append(
                SftExample(
                    query=record["input"],
                    response=record["output"],
                    doc_id=record["meta"]["doc_id"],
                    rank=record["meta"]["rank"],
                    num_candidates=record["meta"]["L"],
                )
            )
    return examples


def emit_triplets_jsonl(triplets: list[RetrieverTriplet], path: str | Path) -> None:
    lines = []
    for triplet in triplets:
        lines.append(
            jsonl_line(
                {
                    "query": triplet.query,
                    "pseudo": triplet.pseudo,
                    "pos": triplet.positive,
                    "neg": list(triplet.negatives),
                    "meta": {"scores": triplet.scores},
                }
            )
        )
    atomic_write_text(path, "".join(lines))


def load_triplets_jsonl(path: str | Path) -> list[RetrieverTriplet]:
    triplets = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            try:
                jsonschema.validate(record, TRIPLET_RECORD_SCHEMA)
            except jsonschema.ValidationError as exc:
                raise ValidationError(f"bad triplet record at line {lineno}: {exc.message}") from None
            triplets.append(
                RetrieverTriplet(
                    query=record["query"],
                    pseudo=record["pseudo"],
                    positive=record["pos"],
                    negatives=tuple(record["neg"]),
                    scores=record["meta"].get("scores", {}),
                )
            )
    return triplets


def validate_sft_file(path: str | Path) -> int:
    """Schema-check every record; returns the record count."""
    return len(load_sft_jsonl(path))


def validate_triplets_file(path: str | Path) -> int:
    return len(load_triplets_jsonl(path))
