"""Retrieval metrics, paired significance, and report aggregation.

nDCG uses the trec gain convention (2^grade - 1) with a 1/log2(pos+1)
discount, normalized by the ideal DCG over the judged set; for binary qrels
the gain reduces to 0/1. Queries without a positive judgment are undefined
for both metrics and are reported as skipped, excluded from dataset means.

All internal math is float64; rounding happens only when rendering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import scipy.stats

from .errors import ParseError, ValidationError
from .retrieval import RankedHits
from .util import atomic_write_text


def _hit_ids(hits) -> list[str]:
    pairs = hits.hits if isinstance(hits, RankedHits) else hits
    return [doc_id for doc_id, _ in pairs]


def ndcg_at_k(hits, judged: Mapping[str, int], k: int) -> float | None:
    """nDCG@k, or None when the query has no positive judgment (skipped)."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    positive = {doc: grade for doc, grade in judged.items() if grade > 0}
    if not positive:
        return None
    dcg = 0.0
    for pos, doc_id in enumerate(_hit_ids(hits)[:k], start=1):
        grade = judged.get(doc_id, 0)
        if grade > 0:
            dcg += (2.0**grade - 1.0) / math.log2(pos + 1)
    ideal = sorted(positive.values(), reverse=True)[:k]
    idcg = sum((2.0**grade - 1.0) / math.log2(pos + 1) for pos, grade in enumerate(ideal, start=1))
    return dcg / idcg


def recall_at_k(hits, judged: Mapping[str, int], k: int) -> float | None:
    """|relevant in top-k| / |relevant|, or None when nothing is relevant."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    relevant = {doc for doc, grade in judged.items() if grade > 0}
    if not relevant:
        return None
    retrieved = set(_hit_ids(hits)[:k])
    return len(relevant & retrieved) / len(relevant)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test.

    Conventions for degenerate inputs (scipy returns nan there): all
    differences zero -> (0.0, 1.0); zero-variance nonzero shift ->
    (signed inf, 0.0).
    """
    if len(a) != len(b):
        raise ValidationError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValidationError("paired t-test needs at least 2 samples")
    diffs = [x - y for x, y in zip(a, b)]
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t_stat = mean / math.sqrt(var / n)
    p_value = 2.0 * float(scipy.stats.t.sf(abs(t_stat), df=n - 1))
    return t_stat, p_value


@dataclass
class DatasetResult:
    values: list[float]               # per-query metric values, skips excluded
    keys: list[str] | None = None     # optional query ids aligned with values
    skipped: int = 0

    @property
    def mean(self) -> float:
        if not self.values:
            raise ValidationError("dataset has no scored queries")
        return sum(self.values) / len(self.values)


@dataclass
class Comparison:
    baseline_means: dict[str, float]
    improvement_pct: dict[str, float]
    baseline_average: float
    average_improvement_pct: float
    p_values: dict[str, float | None]
    pairing: str = "query"


@dataclass
class EvalReport:
    metric: str
    datasets: dict[str, DatasetResult]
    average: float
    comparison: Comparison | None = None
    notes: list[str] = field(default_factory=list)


def _as_result(values) -> DatasetResult:
    if isinstance(values, DatasetResult):
        return values
    if isinstance(values, (int, float)):
        return DatasetResult(values=[float(values)])
    if isinstance(values, Mapping):
        keys = sorted(values)
        return DatasetResult(values=[float(values[key]) for key in keys], keys=list(keys))
    return DatasetResult(values=[float(v) for v in values])


def build_report(
    runs: Mapping[str, object],
    baseline: Mapping[str, object] | None = None,
    metric: str = "ndcg@10",
    pairing: str = "query",
) -> EvalReport:
    """Aggregate per-dataset metric values, optionally against a baseline.

    The cross-dataset average is the unweighted mean of dataset means; the
    average improvement is computed on the two averages, and per-dataset
    improvement is (system - baseline) / baseline * 100 (unrounded here).
    Significance is a paired t-test where >= 2 aligned values exist per
    dataset; scalar inputs get no p-value.
    """
    if not runs:
        raise ValidationError("no datasets to report")
    results = {name: _as_result(values) for name, values in runs.items()}
    average = sum(r.mean for r in results.values()) / len(results)
    comparison = None
    if baseline is not None:
        base_results = {name: _as_result(values) for name, values in baseline.items()}
        if set(base_results) != set(results):
            raise ValidationError(
                f"baseline datasets {sorted(base_results)} do not match system datasets {sorted(results)}"
            )
        baseline_means = {name: base_results[name].mean for name in results}
        improvement = {}
        p_values: dict[str, float | None] = {}
        for name, result in results.items():
            base = base_results[name]
            if base.mean == 0:
                raise ValidationError(f"baseline mean for {name!r} is zero; improvement undefined")
            improvement[name] = (result.mean - base.mean) / base.mean * 100.0
            p_values[name] = _paired_p(result, base)
        baseline_average = sum(baseline_means.values()) / len(baseline_means)
        comparison = Comparison(
            baseline_means=baseline_means,
            improvement_pct=improvement,
            baseline_average=baseline_average,
            average_improvement_pct=(average - baseline_average) / baseline_average * 100.0,
            p_values=p_values,
            pairing=pairing,
        )
    return EvalReport(metric=metric, datasets=results, average=average, comparison=comparison)


def _paired_p(system: DatasetResult, base: DatasetResult) -> float | None:
    if system.keys is not None and base.keys is not None:
        shared = [key for key in system.keys if key in set(base.keys)]
        if len(shared) < 2:
            return None
        sys_map = dict(zip(system.keys, system.values))
        base_map = dict(zip(base.keys, base.values))
        _, p = paired_t_test([sys_map[k] for k in shared], [base_map[k] for k in shared])
        return p
    if len(system.values) != len(base.values) or len(system.values) < 2:
        return None
    _, p = paired_t_test(system.values, base.values)
    return p


def report_to_dict(report: EvalReport) -> dict:
    out: dict = {
        "metric": report.metric,
        "average": report.average,
        "datasets": {
            name: {"mean": r.mean, "values": r.values, "skipped": r.skipped}
            for name, r in report.datasets.items()
        },
    }
    if report.notes:
        out["notes"] = report.notes
    if report.comparison:
        c = report.comparison
        out["comparison"] = {
            "baseline_means": c.baseline_means,
            "baseline_average": c.baseline_average,
            "improvement_pct": c.improvement_pct,
            "average_improvement_pct": c.average_improvement_pct,
            "p_values": c.p_values,
            "pairing": c.pairing,
        }
    return out


def render_report_text(report: EvalReport) -> str:
    """Human-readable table; values rounded to 2 decimals only here."""
    names = list(report.datasets)
    width = max([len(n) for n in names] + [8])
    lines = [f"metric: {report.metric}"]
    header = f"{'dataset':<{width}}  {'mean':>8}  {'queries':>8}  {'skipped':>8}"
    if report.comparison:
        header += f"  {'baseline':>9}  {'improve%':>9}  {'p':>8}"
    lines.append(header)
    for name in names:
        result = report.datasets[name]
        row = f"{name:<{width}}  {result.mean:8.2f}  {len(result.values):8d}  {result.skipped:8d}"
        if report.comparison:
            c = report.comparison
            p = c.p_values.get(name)
            p_text = f"{p:8.4f}" if p is not None else "       -"
            row += f"  {c.baseline_means[name]:9.2f}  {c.improvement_pct[name]:+9.2f}  {p_text}"
        lines.append(row)
    summary = f"{'Average':<{width}}  {report.average:8.2f}"
    if report.comparison:
        summary += (
            f"  {'':8}  {'':8}  {report.comparison.baseline_average:9.2f}"
            f"  {report.comparison.average_improvement_pct:+9.2f}"
        )
        lines.append(summary)
        lines.append(f"pairing: {report.comparison.pairing}")
    else:
        lines.append(summary)
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


# --- trec run files --------------------------------------------------------

def write_trec_run(runs: Mapping[str, object], path: str | Path, tag: str = "slhyde") -> None:
    """Write runs as trec lines: qid Q0 docid rank score tag."""
    lines = []
    for qid in runs:
        hits = runs[qid]
        pairs = hits.hits if isinstance(hits, RankedHits) else hits
        for rank, (doc_id, score) in enumerate(pairs, start=1):
            lines.append(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")
    atomic_write_text(path, "".join(lines))


def load_trec_run(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"run file not found: {path}")
    by_query: dict[str, list[tuple[int, str, float]]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(f"expected 6 whitespace-separated fields in {path.name}", line=lineno)
            qid, _, doc_id, rank_raw, score_raw, _ = parts
            try:
                rank, score = int(rank_raw), float(score_raw)
            except ValueError:
                raise ParseError(f"bad rank or score in {path.name}", line=lineno) from None
            by_query.setdefault(qid, []).append((rank, doc_id, score))
    return {
        qid: [(doc_id, score) for _, doc_id, score in sorted(rows)]
        for qid, rows in by_query.items()
    }
