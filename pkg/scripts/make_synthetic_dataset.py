#!/usr/bin/env python3
"""Emit a synthetic retrieval dataset (corpus.jsonl, queries.jsonl, qrels.tsv).

Each document gets a few unique random anchor tokens plus shared filler; each
query quotes one anchor of its target document plus noise, so retrieval is
solvable but not trivial. Useful for smoke runs of every CLI command without
any real data.
"""
from __future__ import annotations

import argparse
import string
from pathlib import Path

import numpy as np

from slhyde.corpus import Document, Query, RelevanceJudgments, write_corpus, write_qrels, write_queries

LETTERS = np.array(list(string.ascii_lowercase))


def token(rng: np.random.Generator, length: int = 8) -> str:
    return "".join(rng.choice(LETTERS, size=length))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--docs", type=int, default=100)
    parser.add_argument("--queries", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if args.queries > args.docs:
        parser.error("--queries cannot exceed --docs")
    rng = np.random.default_rng(args.seed)
    filler = [token(rng) for _ in range(12)]

    docs = []
    for i in range(args.docs):
        anchors = [token(rng) for _ in range(3)]
        body = anchors * 2 + list(rng.permutation(filler)) + [token(rng) for _ in range(6)]
        docs.append(Document(id=f"d{i:05d}", text=" ".join(body)))

    queries = []
    entries = {}
    for i in range(args.queries):
        target = docs[i]
        text = " ".join([target.text.split()[0]] + [token(rng) for _ in range(3)])
        query = Query(id=f"q{i:05d}", text=text)
        queries.append(query)
        entries[query.id] = {target.id: 1}

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(docs, args.out_dir / "corpus.jsonl")
    write_queries(queries, args.out_dir / "queries.jsonl")
    write_qrels(RelevanceJudgments(entries=entries), args.out_dir / "qrels.tsv")
    print(f"wrote {args.docs} docs / {args.queries} queries to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
