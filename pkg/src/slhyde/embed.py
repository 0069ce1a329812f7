"""Embedding clients, the unit-norm boundary, and the binary vector cache.

Every vector leaving this module is float32 and unit-normalized, which makes
the inner product used by the search indexes equal to cosine similarity.

Cache file format (little-endian):
    magic "SLHE1" | u32 dim | u64 count | count*dim float32
plus a sidecar ids file at <path>.ids: one document id per line, same order.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .corpus import CorpusStore
from .errors import FormatError, ProtocolError, TransportError, ValidationError
from .util import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"SLHE1"
_HEADER = struct.Struct("<5sIQ")


def normalize(vector) -> np.ndarray:
    """L2-normalize to a float32 unit vector. Zero vectors are rejected."""
    arr = np.asarray(vector, dtype=np.float32).ravel()
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValidationError("cannot normalize a zero vector")
    return arr / np.float32(norm)


class MockEmbedderClient:
    """Deterministic character-trigram hashing embedder.

    Signed feature hashing of character 3-grams into `dim` buckets; the same
    text always maps to the same vector, distinct texts rarely collide at
    dim >= 64, and token order matters. `overrides` pins chosen texts to
    chosen vectors, which tests use to construct exact geometries.
    """

    max_retries = 2
    backoff = 0.0

    def __init__(self, dim: int = 256, truncate_chars: int = 1024, overrides=None):
        if dim < 2:
            raise ValidationError("embedding dim must be >= 2")
        self.dim = dim
        self.truncate_chars = truncate_chars
        self.batch_size = 1024
        self.calls = 0
        self._overrides = {
            text: normalize(vec) for text, vec in (overrides or {}).items()
        }
        self._memo: dict[str, tuple[int, float]] = {}

    def _feature(self, gram: str) -> tuple[int, float]:
        cached = self._memo.get(gram)
        if cached is None:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            cached = (value % self.dim, 1.0 if value >> 63 else -1.0)
            self._memo[gram] = cached
        return cached

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        grams = (
            [text[i : i + 3] for i in range(len(text) - 2)] if len(text) >= 3 else [text]
        )
        for gram in grams:
            bucket, sign = self._feature(gram)
            vec[bucket] += sign
        if not vec.any():
            # Signed collisions cancelled out; fall back to a single marker bucket.
            bucket, _ = self._feature(text)
            vec[bucket] = 1.0
        return vec.astype(np.float32)

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        self.calls += 1
        rows = []
        for text in texts:
            override = self._overrides.get(text)
            rows.append(override if override is not None else self._vector(text))
        return np.vstack(rows) if rows else np.zeros((0, self.dim), dtype=np.float32)


class RemoteEmbedderClient:
    """Embeddings HTTP client (POST JSON: model, input list; response: data[].embedding)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        api_key: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 2,
        backoff: float = 1.0,
        batch_size: int = 64,
        truncate_chars: int = 1024,
        session=None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.batch_size = batch_size
        self.truncate_chars = truncate_chars
        self._session = session if session is not None else requests.Session()

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._session.post(
                self.endpoint,
                json={"model": self.model, "input": list(texts)},
                timeout=self.timeout,
                headers=headers,
            )
        except Exception as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if getattr(response, "status_code", 200) != 200:
            raise TransportError(f"endpoint returned HTTP {response.status_code}")
        try:
            data = response.json()["data"]
            vectors = [row["embedding"] for row in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from exc
        if len(vectors) != len(texts):
            raise ProtocolError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        matrix = np.asarray(vectors, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[1] != self.dim:
            raise ProtocolError(
                f"embedding dim mismatch: endpoint returned {matrix.shape}, expected dim {self.dim}"
            )
        return matrix


def embed_texts(client, texts: list[str]) -> np.ndarray:
    """Embed texts in order; returns a (len(texts), dim) float32 unit-row matrix.

    Inputs are truncated to the client's character budget before the request.
    """
    if not texts:
        raise ValidationError("embed_texts requires at least one text")
    for i, text in enumerate(texts):
        if not text.strip():
            raise ValidationError(f"text at position {i} is empty after trimming")
    truncated = [t[: client.truncate_chars] for t in texts]
    batch_size = getattr(client, "batch_size", len(truncated)) or len(truncated)
    rows = []
    for start in range(0, len(truncated), batch_size):
        batch = truncated[start : start + batch_size]
        rows.append(_embed_batch_with_retry(client, batch))
    matrix = np.vstack(rows)
    if not np.isfinite(matrix).all():
        raise ProtocolError("embedder returned non-finite values")
    norms = np.linalg.norm(matrix, axis=1)
    if (norms == 0).any():
        raise ValidationError("embedder returned a zero vector")
    return (matrix / norms[:, None]).astype(np.float32)


def _embed_batch_with_retry(client, batch: list[str]) -> np.ndarray:
    attempts = getattr(client, "max_retries", 0) + 1
    backoff = getattr(client, "backoff", 0.0)
    for attempt in range(1, attempts + 1):
        try:
            return client.embed_batch(batch)
        except TransportError as exc:
            logger.warning("embedding attempt %d/%d failed: %s", attempt, attempts, exc)
            if attempt == attempts:
                raise TransportError("embedding failed", attempts=attempts) from exc
            if backoff > 0:
                time.sleep(backoff * 2 ** (attempt - 1))
    raise AssertionError("unreachable")


def embed_text(client, text: str) -> np.ndarray:
    return embed_texts(client, [text])[0]


@dataclass
class EmbeddingCache:
    """Ordered (ids, matrix) pair; rows are unit float32 vectors."""

    ids: list[str]
    matrix: np.ndarray
    _positions: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValidationError("cache matrix must be 2-dimensional")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValidationError(
                f"id count {len(self.ids)} does not match matrix rows {self.matrix.shape[0]}"
            )
        self._positions = {}
        for pos, doc_id in enumerate(self.ids):
            if doc_id in self._positions:
                raise ValidationError(f"duplicate id {doc_id!r} in cache")
            self._positions[doc_id] = pos

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, doc_id: str) -> int:
        try:
            return self._positions[doc_id]
        except KeyError:
            raise ValidationError(f"unknown id {doc_id!r}") from None

    def row(self, doc_id: str) -> np.ndarray:
        return self.matrix[self.position(doc_id)]


def save_cache(cache: EmbeddingCache, path: str | Path) -> None:
    path = Path(path)
    for doc_id in cache.ids:
        if "\n" in doc_id or "\r" in doc_id:
            raise ValidationError(f"id {doc_id!r} contains a newline; cannot serialize")
    header = _HEADER.pack(CACHE_MAGIC, cache.dim, len(cache))
    payload = np.ascontiguousarray(cache.matrix, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)
    atomic_write_text(Path(str(path) + ".ids"), "".join(f"{i}\n" for i in cache.ids))


def load_cache(path: str | Path, expect_dim: int | None = None) -> EmbeddingCache:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"cache file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size or blob[:5] != CACHE_MAGIC:
        raise FormatError(f"bad cache magic in {path}")
    _, dim, count = _HEADER.unpack_from(blob)
    expected = _HEADER.size + count * dim * 4
    if len(blob) != expected:
        raise FormatError(f"cache file {path} is truncated or padded ({len(blob)} != {expected} bytes)")
    if expect_dim is not None and dim != expect_dim:
        raise ValidationError(f"cache dim {dim} does not match expected {expect_dim}")
    matrix = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, dim).copy()
    if not np.isfinite(matrix).all():
        raise FormatError(f"cache file {path} contains non-finite values")
    ids_path = Path(str(path) + ".ids")
    if not ids_path.exists():
        raise FormatError(f"ids sidecar not found: {ids_path}")
    ids = ids_path.read_text("utf-8").splitlines()
    if len(ids) != count:
        raise FormatError(f"ids sidecar has {len(ids)} lines, header says {count}")
    return EmbeddingCache(ids=ids, matrix=matrix)


def cache_embeddings(
    client, store: CorpusStore, path: str | Path, refresh: bool = False
) -> EmbeddingCache:
    """Embed a corpus into a cache file, reusing an existing valid cache.

    A cache is reused only when its ids match the store order and its dim
    matches the client; anything unreadable or stale is rebuilt with a warning.
    """
    path = Path(path)
    if not refresh and path.exists():
        try:
            cache = load_cache(path)
        except FormatError as exc:
            logger.warning("rebuilding unreadable cache %s: %s", path, exc)
        else:
            if cache.ids == store.ids and cache.dim == client.dim:
                logger.info("reusing embedding cache %s (%d vectors)", path, len(cache))
                return cache
            logger.warning("cache %s is stale (ids or dim changed); rebuilding", path)
    texts = [doc.indexed_text for doc in store]
    if texts:
        matrix = embed_texts(client, texts)
    else:
        matrix = np.zeros((0, client.dim), dtype=np.float32)
    cache = EmbeddingCache(ids=store.ids, matrix=matrix)
    save_cache(cache, path)
    logger.info("embedded %d documents into %s", len(cache), path)
    return cache
