"""Command-line surface binding the modules into reproducible pipelines.

Commands: embed-corpus, search, hyde-search, evaluate, build-sft-data,
build-retriever-data, construct-benchmark. Exit codes: 0 ok, 1 validation
error, 2 runtime error, 3 completed but degraded (fallbacks or flags).

Run artifacts are written to a staging directory and promoted into the
output directory file-by-file (os.replace) only when the command succeeds;
embedding caches are managed in place with atomic writes so unchanged
corpora are never re-embedded.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from .ann import AnnIndex
from .benchkit import PipelineConfig, load_raw_queries, load_raw_texts, run_pipeline
from .config import (
    RunConfig,
    build_embedder_client,
    build_generator_client,
    load_config,
    write_resolved_config,
)
from .corpus import load_corpus, load_qrels, load_queries, sample_documents
from .embed import cache_embeddings, embed_text
from .errors import ParseError, SlhydeError, ValidationError
from .hyde import FusionConfig, hyde_search
from .metrics import build_report, ndcg_at_k, recall_at_k, render_report_text, report_to_dict, write_trec_run
from .retrieval import DenseIndex, dense_search
from .selflearn import (
    LossConfig,
    build_generator_dataset,
    build_retriever_dataset,
    dataset_reference_loss,
    emit_sft_jsonl,
    emit_triplets_jsonl,
    load_sft_jsonl,
)
from .textgen import SamplingConfig
from .util import atomic_write_text, derive_seed, dump_json, jsonl_line

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_DEGRADED = 3


@contextmanager
def staged_outputs(out_dir: Path):
    """Write into a sibling staging dir; promote per-file on success only."""
    staging = out_dir.parent / (out_dir.name + ".staging")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.rglob("*")):
        target = out_dir / item.relative_to(staging)
        if item.is_dir():
            target.mkdir(parents=True, exist_ok=True)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            os.replace(item, target)
    shutil.rmtree(staging, ignore_errors=True)


def _sampling(config: RunConfig, seed: int | None = None) -> SamplingConfig:
    return SamplingConfig(
        temperature=config.sampling.temperature,
        max_output_tokens=config.sampling.max_output_tokens,
        seed=seed,
    )


def _fusion_for(config: RunConfig, dataset) -> FusionConfig:
    # The hypothetical-document template is task-dependent; datasets may
    # override the run-wide choice.
    return FusionConfig(
        strategy=config.fusion.strategy,
        n=config.fusion.n,
        template=dataset.template or config.fusion.template,
    )


def _dataset_cache(config: RunConfig, emb, dataset):
    if not dataset.corpus or not dataset.queries:
        raise ValidationError(
            f"dataset {dataset.name!r} needs corpus and queries paths in the config"
        )
    store = load_corpus(dataset.corpus)
    cache = cache_embeddings(emb, store, Path(config.out_dir) / f"{dataset.name}.emb")
    return store, cache


def cmd_embed_corpus(config: RunConfig) -> int:
    emb = build_embedder_client(config)
    for dataset in config.all_datasets():
        _dataset_cache(config, emb, dataset)
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
    return EXIT_OK


def cmd_search(config: RunConfig, k: int | None = None) -> int:
    emb = build_embedder_client(config)
    k = k or max(config.eval.k_values)
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
        for dataset in config.all_datasets():
            store, cache = _dataset_cache(config, emb, dataset)
            index = DenseIndex(cache)
            queries = load_queries(dataset.queries)
            runs = {q.id: dense_search(index, embed_text(emb, q.text), k) for q in queries}
            write_trec_run(runs, staging / f"run_{dataset.name}.trec", tag="dense")
    return EXIT_OK


def cmd_hyde_search(config: RunConfig, k: int | None = None, trace: bool = False) -> int:
    gen = build_generator_client(config)
    emb = build_embedder_client(config)
    k = k or max(config.eval.k_values)
    degraded = False
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
        for dataset in config.all_datasets():
            fusion = _fusion_for(config, dataset)
            store, cache = _dataset_cache(config, emb, dataset)
            index = DenseIndex(cache)
            queries = load_queries(dataset.queries)
            runs = {}
            trace_lines = []
            for query in queries:
                sampling = _sampling(config, derive_seed(config.seed, "hyde", dataset.name, query.id))
                hits = hyde_search(query, gen, emb, index, fusion, k, sampling)
                degraded = degraded or bool(hits.meta.get("degraded"))
                runs[query.id] = hits
                if trace:
                    trace_lines.append(
                        jsonl_line(
                            {
                                "query_id": query.id,
                                "hypothetical_texts": hits.meta.get("hypothetical_texts", []),
                                "hits": [[doc_id, score] for doc_id, score in hits],
                            }
                        )
                    )
            write_trec_run(runs, staging / f"run_{dataset.name}.trec", tag="hyde")
            if trace:
                atomic_write_text(staging / f"trace_{dataset.name}.jsonl", "".join(trace_lines))
    return EXIT_DEGRADED if degraded else EXIT_OK


def _evaluate_dataset(config: RunConfig, gen, emb, dataset, mode: str):
    """Per-dataset evaluation; returns per-metric per-query means plus run stats."""
    if not dataset.qrels:
        raise ValidationError(f"dataset {dataset.name!r} has no qrels path; evaluate requires one")
    queries = load_queries(dataset.queries)
    qrels = load_qrels(dataset.qrels)
    store, cache = _dataset_cache(config, emb, dataset)
    index = DenseIndex(cache)
    judged_ids = set(qrels.entries)
    eval_queries = [q for q in queries if q.id in judged_ids]
    orphan = judged_ids - {q.id for q in queries}
    if orphan:
        logger.warning("%d qrels queries missing from the query file are ignored", len(orphan))
    if not eval_queries:
        raise ValidationError(f"dataset {dataset.name!r} has no judged queries to evaluate")

    max_k = max(list(config.eval.k_values) + [config.eval.primary_k])
    fusion = _fusion_for(config, dataset)
    degraded = False

    dense_hits = {q.id: dense_search(index, embed_text(emb, q.text), max_k) for q in eval_queries}
    repeats = config.eval.repeats if mode == "hyde" else 1
    run_hits: list[dict] = []
    if mode == "retriever":
        run_hits.append(dense_hits)
    else:
        def _one_run(run_index: int):
            hits_by_query = {}
            for query in eval_queries:
                sampling = _sampling(
                    config, derive_seed(config.seed, "eval", dataset.name, run_index, query.id)
                )
                hits = hyde_search(query, gen, emb, index, fusion, max_k, sampling)
                hits_by_query[query.id] = hits
            return hits_by_query

        if config.parallelism > 1:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                run_hits = list(pool.map(_one_run, range(repeats)))
        else:
            run_hits = [_one_run(r) for r in range(repeats)]
        for hits_by_query in run_hits:
            degraded = degraded or any(h.meta.get("degraded") for h in hits_by_query.values())

    def _metric_fn(name: str):
        kind, _, k_raw = name.partition("@")
        k_val = int(k_raw)
        return (lambda hits, judged: ndcg_at_k(hits, judged, k_val)) if kind == "ndcg" else (
            lambda hits, judged: recall_at_k(hits, judged, k_val)
        )

    metric_names = [f"ndcg@{config.eval.primary_k}"] + [f"recall@{k}" for k in config.eval.k_values]
    metric_names = list(dict.fromkeys(metric_names))
    per_metric: dict[str, dict] = {}
    for name in metric_names:
        fn = _metric_fn(name)
        per_run_values: list[dict[str, float]] = []
        skipped = 0
        for hits_by_query in run_hits:
            values = {}
            for query in eval_queries:
                value = fn(hits_by_query[query.id], qrels.grades_for(query.id))
                if value is not None:
                    values[query.id] = value
            per_run_values.append(values)
        skipped = len(eval_queries) - len(per_run_values[0]) if per_run_values else 0
        # per-query mean across runs, for query-level pairing
        query_ids = sorted(set().union(*[set(v) for v in per_run_values]))
        per_query_mean = {
            qid: sum(values[qid] for values in per_run_values if qid in values)
            / sum(1 for values in per_run_values if qid in values)
            for qid in query_ids
        }
        run_means = [sum(v.values()) / len(v) for v in per_run_values if v]
        baseline_values = {}
        for query in eval_queries:
            value = fn(dense_hits[query.id], qrels.grades_for(query.id))
            if value is not None:
                baseline_values[query.id] = value
        per_metric[name] = {
            "per_query": per_query_mean,
            "run_means": run_means,
            "spread": statistics.stdev(run_means) if len(run_means) > 1 else 0.0,
            "baseline_per_query": baseline_values,
            "skipped": skipped,
        }
    return per_metric, run_hits, degraded


def cmd_evaluate(config: RunConfig, mode: str = "hyde") -> int:
    gen = build_generator_client(config) if mode == "hyde" else None
    emb = build_embedder_client(config)
    degraded = False
    all_metrics: dict[str, dict] = {}
    run_files: dict[str, list[dict]] = {}
    for dataset in config.all_datasets():
        per_metric, run_hits, dataset_degraded = _evaluate_dataset(config, gen, emb, dataset, mode)
        degraded = degraded or dataset_degraded
        all_metrics[dataset.name] = per_metric
        run_files[dataset.name] = run_hits

    primary = f"ndcg@{config.eval.primary_k}"
    reports = {}
    for metric_name in next(iter(all_metrics.values())).keys():
        system = {name: all_metrics[name][metric_name]["per_query"] for name in all_metrics}
        baseline = None
        if mode == "hyde" and config.eval.compare_to_dense:
            baseline = {name: all_metrics[name][metric_name]["baseline_per_query"] for name in all_metrics}
        if config.eval.pairing == "run" and mode == "hyde":
            system = {name: all_metrics[name][metric_name]["run_means"] for name in all_metrics}
            if baseline is not None:
                baseline = {
                    name: [
                        sum(all_metrics[name][metric_name]["baseline_per_query"].values())
                        / len(all_metrics[name][metric_name]["baseline_per_query"])
                    ]
                    * len(all_metrics[name][metric_name]["run_means"])
                    for name in all_metrics
                }
        report = build_report(system, baseline, metric=metric_name, pairing=config.eval.pairing)
        for name in all_metrics:
            report.datasets[name].skipped = all_metrics[name][metric_name]["skipped"]
        reports[metric_name] = report

    payload = {
        "mode": mode,
        "repeats": config.eval.repeats if mode == "hyde" else 1,
        "reports": {name: report_to_dict(report) for name, report in reports.items()},
        "per_run": {
            ds: {
                metric: {
                    "run_means": values["run_means"],
                    "spread": values["spread"],
                }
                for metric, values in metrics.items()
            }
            for ds, metrics in all_metrics.items()
        },
        "degraded": degraded,
    }
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
        atomic_write_text(staging / "report.json", dump_json(payload))
        atomic_write_text(staging / "report.txt", render_report_text(reports[primary]))
        for dataset_name, hits_list in run_files.items():
            for run_index, hits_by_query in enumerate(hits_list):
                write_trec_run(
                    hits_by_query,
                    staging / f"run_{dataset_name}_r{run_index}.trec",
                    tag=mode,
                )
    print(render_report_text(reports[primary]), end="")
    return EXIT_DEGRADED if degraded else EXIT_OK


def cmd_build_sft(config: RunConfig) -> int:
    gen = build_generator_client(config)
    emb = build_embedder_client(config)
    dataset = config.all_datasets()[0]
    store, cache = _dataset_cache(config, emb, dataset)
    index = DenseIndex(cache)
    sample_n = config.selflearn.sample_docs or len(store)
    docs = sample_documents(store, min(sample_n, len(store)), derive_seed(config.seed, "sample"))
    result = build_generator_dataset(
        docs,
        gen,
        emb,
        index,
        candidates_per_doc=config.selflearn.candidates_per_query,
        seed=config.seed,
        rank_cutoff=config.selflearn.rank_cutoff,
        rank_scoring=config.selflearn.rank_scoring,
        max_skip_fraction=config.selflearn.max_skip_fraction,
        sampling=_sampling(config),
        parallelism=config.parallelism,
    )
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
        emit_sft_jsonl(result.examples, staging / "sft.jsonl")
        atomic_write_text(
            staging / "sft_stats.json",
            dump_json(
                {
                    "total_documents": result.total,
                    "emitted": len(result.examples),
                    "dropped_by_cutoff": result.dropped_by_cutoff,
                    "skipped_errors": result.skipped_errors,
                }
            ),
        )
    return EXIT_OK


def cmd_build_triplets(config: RunConfig, sft_path: str | None = None) -> int:
    gen = build_generator_client(config)
    emb = build_embedder_client(config)
    dataset = config.all_datasets()[0]
    store, cache = _dataset_cache(config, emb, dataset)
    sft_file = Path(sft_path) if sft_path else Path(config.out_dir) / "sft.jsonl"
    if not sft_file.exists():
        raise ValidationError(f"SFT dataset not found: {sft_file} (run build-sft-data first)")
    examples = load_sft_jsonl(sft_file)
    ann = AnnIndex(
        cache,
        graph_degree=config.ann.graph_degree,
        build_breadth=config.ann.build_breadth,
        search_breadth=config.ann.search_breadth,
        seed=derive_seed(config.seed, "ann"),
    )
    triplets = build_retriever_dataset(
        examples,
        gen,
        emb,
        ann,
        m=config.selflearn.negatives,
        reuse_pseudo=config.selflearn.reuse_pseudo,
        template=config.fusion.template,
        seed=config.seed,
        sampling=_sampling(config),
        parallelism=config.parallelism,
    )
    losses = dataset_reference_loss(triplets, emb, cache, LossConfig(tau=config.selflearn.tau))
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
        emit_triplets_jsonl(triplets, staging / "triplets.jsonl")
        atomic_write_text(
            staging / "triplets_stats.json",
            dump_json(
                {
                    "count": len(triplets),
                    "negatives_per_triplet": config.selflearn.negatives,
                    "tau": config.selflearn.tau,
                    "mean_reference_loss": (sum(losses) / len(losses)) if losses else None,
                }
            ),
        )
    return EXIT_OK


def cmd_construct_benchmark(
    config: RunConfig, texts_path: str | None = None, queries_path: str | None = None
) -> int:
    texts_file = texts_path or config.benchmark.raw_texts
    queries_file = queries_path or config.benchmark.raw_queries
    if not texts_file or not queries_file:
        raise ValidationError("construct-benchmark needs raw texts and raw queries paths")
    med = config.benchmark.med_threshold
    rel = config.benchmark.rel_threshold
    if config.clients == "remote" and (med is None or rel is None):
        raise ValidationError(
            "med_threshold and rel_threshold must be set explicitly for remote (production) runs"
        )
    judge = build_generator_client(config)
    pipeline_cfg = PipelineConfig(
        judge=judge,
        med_threshold=0.5 if med is None else med,
        rel_threshold=0.6 if rel is None else rel,
        bm25_top_k=config.benchmark.bm25_top_k,
        rerank_top_m=config.benchmark.rerank_top_m,
        max_review_fraction=config.benchmark.max_review_fraction,
        bm25_k1=config.bm25.k1,
        bm25_b=config.bm25.b,
        bm25_tokenizer=config.bm25.tokenizer,
    )
    texts = load_raw_texts(texts_file)
    queries = load_raw_queries(queries_file)
    with staged_outputs(Path(config.out_dir)) as staging:
        write_resolved_config(config, staging)
        report = run_pipeline(texts, queries, pipeline_cfg, staging)
    return EXIT_DEGRADED if report.flagged else EXIT_OK


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--clients", choices=["mock", "remote"], default=None)
    parser.add_argument("--parallelism", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slhyde", description=__doc__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in (
        "embed-corpus",
        "search",
        "hyde-search",
        "evaluate",
        "build-sft-data",
        "build-retriever-data",
        "construct-benchmark",
    ):
        cmd = sub.add_parser(name)
        _add_shared_flags(cmd)
        if name in ("search", "hyde-search"):
            cmd.add_argument("--k", type=int, default=None)
        if name == "hyde-search":
            cmd.add_argument("--trace", action="store_true")
        if name == "evaluate":
            cmd.add_argument("--mode", choices=["retriever", "hyde"], default="hyde")
        if name == "build-retriever-data":
            cmd.add_argument("--sft", default=None, help="path to the SFT jsonl")
        if name == "construct-benchmark":
            cmd.add_argument("--texts", default=None)
            cmd.add_argument("--queries", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(
            args.config,
            seed=args.seed,
            out_dir=args.out,
            clients=args.clients,
            parallelism=args.parallelism,
        )
        if args.command == "embed-corpus":
            return cmd_embed_corpus(config)
        if args.command == "search":
            return cmd_search(config, k=args.k)
        if args.command == "hyde-search":
            return cmd_hyde_search(config, k=args.k, trace=args.trace)
        if args.command == "evaluate":
            return cmd_evaluate(config, mode=args.mode)
        if args.command == "build-sft-data":
            return cmd_build_sft(config)
        if args.command == "build-retriever-data":
            return cmd_build_triplets(config, sft_path=args.sft)
        if args.command == "construct-benchmark":
            return cmd_construct_benchmark(config, texts_path=args.texts, queries_path=args.queries)
        raise ValidationError(f"unknown command {args.command!r}")
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SlhydeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
