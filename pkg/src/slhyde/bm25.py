"""Okapi BM25 lexical index with a CJK-aware tokenizer.

Defaults k1=0.9, b=0.4. IDF is the Lucene-style ln(1 + (N - df + 0.5) / (df + 0.5)),
which is strictly positive, so only documents containing at least one query
term can appear in results.

The default "cjk" tokenizer lowercases and splits on non-word characters,
then expands runs of CJK characters into unigrams plus bigrams (the standard
label-free segmentation); it is a no-op for pure-Latin text. "simple" keeps
whole word tokens only.
"""
from __future__ import annotations

import math
import re
import struct
from collections import Counter
from pathlib import Path

from .corpus import CorpusStore
from .errors import FormatError, ValidationError
from .retrieval import RankedHits
from .util import atomic_write_bytes

BM25_MAGIC = b"SLHB1"
_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)

TOKENIZERS = ("cjk", "simple")


def _is_cjk(ch: str) -> bool:
    code = ord(ch)
    return (
        0x4E00 <= code <= 0x9FFF
        or 0x3400 <= code <= 0x4DBF
        or 0xF900 <= code <= 0xFAFF
    )


def _expand_cjk(word: str) -> list[str]:
    tokens: list[str] = []
    run: list[str] = []

    def flush_run():
        if not run:
            return
        tokens.extend(run)
        tokens.extend(run[i] + run[i + 1] for i in range(len(run) - 1))
        run.clear()

    buffer = []
    for ch in word:
        if _is_cjk(ch):
            if buffer:
                tokens.append("".join(buffer))
                buffer = []
            run.append(ch)
        else:
            flush_run()
            buffer.append(ch)
    flush_run()
    if buffer:
        tokens.append("".join(buffer))
    return tokens


def tokenize(text: str, mode: str = "cjk") -> list[str]:
    if mode not in TOKENIZERS:
        raise ValidationError(f"unknown tokenizer {mode!r}")
    words = _WORD_RE.findall(text.lower())
    if mode == "simple":
        return words
    tokens: list[str] = []
    for word in words:
        if any(_is_cjk(ch) for ch in word):
            tokens.extend(_expand_cjk(word))
        else:
            tokens.append(word)
    return tokens


class Bm25Index:
    """Inverted index with postings (doc position, term frequency) in doc order."""

    def __init__(
        self,
        ids: list[str],
        postings: dict[str, list[tuple[int, int]]],
        doc_lens: list[int],
        k1: float = 0.9,
        b: float = 0.4,
        tokenizer: str = "cjk",
    ):
        if tokenizer not in TOKENIZERS:
            raise ValidationError(f"unknown tokenizer {tokenizer!r}")
        self.ids = list(ids)
        self.postings = postings
        self.doc_lens = list(doc_lens)
        self.k1 = float(k1)
        self.b = float(b)
        self.tokenizer = tokenizer
        self.avgdl = (sum(self.doc_lens) / len(self.doc_lens)) if self.doc_lens else 0.0

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(
        cls,
        store: CorpusStore,
        k1: float = 0.9,
        b: float = 0.4,
        tokenizer: str = "cjk",
    ) -> "Bm25Index":
        postings: dict[str, list[tuple[int, int]]] = {}
        doc_lens = []
        for pos, doc in enumerate(store):
            tokens = tokenize(doc.indexed_text, tokenizer)
            doc_lens.append(len(tokens))
            for term, tf in Counter(tokens).items():
                postings.setdefault(term, []).append((pos, tf))
        return cls(store.ids, postings, doc_lens, k1=k1, b=b, tokenizer=tokenizer)

    def idf(self, term: str) -> float:
        plist = self.postings.get(term)
        if not plist:
            return 0.0
        df = len(plist)
        return math.log(1.0 + (len(self.ids) - df + 0.5) / (df + 0.5))


def bm25_search(index: Bm25Index, query_text: str, k: int) -> RankedHits:
    """Okapi BM25 top-k; query terms score with multiplicity; dense tie rule."""
    if len(index) == 0:
        raise ValidationError("cannot search an empty index")
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores: dict[int, float] = {}
    k1, b, avgdl = index.k1, index.b, index.avgdl
    for term in tokenize(query_text, index.tokenizer):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for pos, tf in plist:
            denom = tf + k1 * (1.0 - b + b * index.doc_lens[pos] / avgdl)
            scores[pos] = scores.get(pos, 0.0) + idf * tf * (k1 + 1.0) / denom
    ranked = sorted(scores.items(), key=lambda item: (-item[1], index.ids[item[0]]))
    return RankedHits(hits=[(index.ids[pos], score) for pos, score in ranked[:k]])


def save_bm25(index: Bm25Index, path: str | Path) -> None:
    def _pack_str(s: str) -> bytes:
        raw = s.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw

    parts = [BM25_MAGIC, struct.pack("<dd", index.k1, index.b), _pack_str(index.tokenizer)]
    parts.append(struct.pack("<Q", len(index.ids)))
    for doc_id, doc_len in zip(index.ids, index.doc_lens):
        parts.append(_pack_str(doc_id))
        parts.append(struct.pack("<I", doc_len))
    parts.append(struct.pack("<Q", len(index.postings)))
    for term in sorted(index.postings):
        plist = index.postings[term]
        parts.append(_pack_str(term))
        parts.append(struct.pack("<I", len(plist)))
        for pos, tf in plist:
            parts.append(struct.pack("<II", pos, tf))
    atomic_write_bytes(path, b"".join(parts))


def load_bm25(path: str | Path) -> Bm25Index:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"index file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 5 or blob[:5] != BM25_MAGIC:
        raise FormatError(f"bad index magic in {path}")
    offset = 5

    def _need(nbytes: int):
        nonlocal offset
        if offset + nbytes > len(blob):
            raise FormatError(f"index file {path} is truncated")

    def _read_str() -> str:
        nonlocal offset
        _need(4)
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        _need(length)
        raw = blob[offset : offset + length]
        offset += length
        return raw.decode("utf-8")

    _need(16)
    k1, b = struct.unpack_from("<dd", blob, offset)
    offset += 16
    tokenizer = _read_str()
    _need(8)
    (ndocs,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    ids, doc_lens = [], []
    for _ in range(ndocs):
        ids.append(_read_str())
        _need(4)
        (doc_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        doc_lens.append(doc_len)
    _need(8)
    (nterms,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(nterms):
        term = _read_str()
        _need(4)
        (df,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        _need(df * 8)
        plist = []
        for _ in range(df):
            pos, tf = struct.unpack_from("<II", blob, offset)
            offset += 8
            plist.append((pos, tf))
        postings[term] = plist
    if offset != len(blob):
        raise FormatError(f"index file {path} has trailing bytes")
    return Bm25Index(ids, postings, doc_lens, k1=k1, b=b, tokenizer=tokenizer)
