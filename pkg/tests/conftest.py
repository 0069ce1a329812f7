"""Shared synthetic-data builders and fixtures."""
from __future__ import annotations

import string

import numpy as np
import pytest

from slhyde.corpus import CorpusStore, Document, Query
from slhyde.embed import MockEmbedderClient, cache_embeddings
from slhyde.retrieval import DenseIndex

LETTERS = np.array(list(string.ascii_lowercase))


def random_token(rng: np.random.Generator, length: int = 8) -> str:
    return "".join(rng.choice(LETTERS, size=length))


def synthetic_docs(
    n: int,
    seed: int = 0,
    anchors_per_doc: int = 3,
    shared_vocab: int = 12,
    extra_tokens: int = 6,
) -> list[Document]:
    """Documents with distinctive anchor tokens plus shared filler.

    Anchors are random 8-char strings unique to each document, so the trigram
    mock embedder separates documents well while the filler gives realistic
    overlap.
    """
    rng = np.random.default_rng(seed)
    filler = [random_token(rng) for _ in range(shared_vocab)]
    docs = []
    for i in range(n):
        anchors = [random_token(rng) for _ in range(anchors_per_doc)]
        extra = [random_token(rng) for _ in range(extra_tokens)]
        tokens = anchors * 2 + list(rng.permutation(filler)) + extra
        docs.append(Document(id=f"d{i:04d}", text=" ".join(tokens)))
    return docs


def queries_for_docs(
    docs: list[Document],
    seed: int = 1,
    anchor_tokens: int = 1,
    noise_tokens: int = 3,
) -> list[Query]:
    """One query per document: a few of its tokens plus random noise."""
    rng = np.random.default_rng(seed)
    queries = []
    for i, doc in enumerate(docs):
        tokens = doc.text.split()
        picked = list(tokens[:anchor_tokens])
        picked += [random_token(rng) for _ in range(noise_tokens)]
        queries.append(Query(id=f"q{i:04d}", text=" ".join(picked)))
    return queries


@pytest.fixture
def mock_emb():
    return MockEmbedderClient(dim=256)


@pytest.fixture
def small_store():
    return CorpusStore(synthetic_docs(30, seed=7))


@pytest.fixture
def small_index(tmp_path, mock_emb, small_store):
    cache = cache_embeddings(mock_emb, small_store, tmp_path / "small.emb")
    return DenseIndex(cache)
