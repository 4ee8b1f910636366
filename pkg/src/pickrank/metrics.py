"""Ranking metrics (MRR, truncated MRR@k, recall@k) and the evaluation runner.

All metrics take a list of :class:`QueryResult` and return floats in [0, 1].
Ranks are 1-indexed. A query whose relevant ids are missing from its ranked
pool is treated as a data error and raises, never as a zero score.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import DataError

RECALL_KS = (1, 5, 10, 20)


@dataclass(frozen=True)
class QueryResult:
    """One evaluated query: the ranked candidate ids and the relevant set."""

    sample_id: str
    ranking: tuple[str, ...]
    relevant: frozenset[str]

    def __post_init__(self):
        if not self.relevant:
            raise DataError(f"query {self.sample_id!r} has an empty relevant set")
        if len(set(self.ranking)) != len(self.ranking):
            raise DataError(f"query {self.sample_id!r} ranking contains duplicates")

    def first_relevant_rank(self) -> int:
        for i, cid in enumerate(self.ranking, start=1):
            if cid in self.relevant:
                return i
        raise DataError(
            f"query {self.sample_id!r}: no relevant candidate present in its "
            f"ranked pool (relevant={sorted(self.relevant)})"
        )


def mrr(results: list[QueryResult]) -> float:
    """Mean reciprocal rank of the first relevant candidate."""
    if not results:
        raise DataError("mrr: empty result list")
    return sum(1.0 / r.first_relevant_rank() for r in results) / len(results)


def mrr_at_k(results: list[QueryResult], k: int) -> float:
    """MRR where queries whose first relevant rank exceeds ``k`` contribute 0."""
    if k < 1:
        raise DataError(f"mrr_at_k: k must be >= 1, got {k}")
    if not results:
        raise DataError("mrr_at_k: empty result list")
    total = 0.0
    for r in results:
        rank = r.first_relevant_rank()
        if rank <= k:
            total += 1.0 / rank
    return total / len(results)


def recall_at_k(results: list[QueryResult], k: int) -> float:
    """Mean fraction of each query's relevant set found in its top-k."""
    if k < 1:
        raise DataError(f"recall_at_k: k must be >= 1, got {k}")
    if not results:
        raise DataError("recall_at_k: empty result list")
    total = 0.0
    for r in results:
        r.first_relevant_rank()  # fail fast on missing relevant ids
        top = set(r.ranking[:k])
        total += len(top & r.relevant) / len(r.relevant)
    return total / len(results)


@dataclass
class Report:
    """Aggregate metrics plus the per-query breakdown behind them."""

    mrr: float
    mrr_at_10: float
    recall_at: dict[int, float]
    n_inst: int
    per_query: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_inst": self.n_inst,
            "mrr": self.mrr,
            "mrr_at_10": self.mrr_at_10,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
        }

    def to_text(self) -> str:
        lines = [f"queries: {self.n_inst}", f"MRR: {self.mrr:.4f}", f"MRR@10: {self.mrr_at_10:.4f}"]
        for k in sorted(self.recall_at):
            lines.append(f"R@{k}: {self.recall_at[k]:.4f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One-row CSV with MRR plus recall columns as percentages."""
        buf = io.StringIO()
        ks = sorted(self.recall_at)
        writer = csv.writer(buf)
        writer.writerow(["MRR"] + [f"R@{k}[%]" for k in ks])
        writer.writerow([f"{self.mrr:.3f}"] + [f"{100.0 * self.recall_at[k]:.1f}" for k in ks])
        return buf.getvalue()


def build_report(results: list[QueryResult]) -> Report:
    """Compute the full metric set over the given query results."""
    per_query = [
        {
            "sample_id": r.sample_id,
            "first_relevant_rank": r.first_relevant_rank(),
            "pool_size": len(r.ranking),
            "n_relevant": len(r.relevant),
        }
        for r in results
    ]
    return Report(
        mrr=mrr(results),
        mrr_at_10=mrr_at_k(results, 10),
        recall_at={k: recall_at_k(results, k) for k in RECALL_KS},
        n_inst=len(results),
        per_query=per_query,
    )
