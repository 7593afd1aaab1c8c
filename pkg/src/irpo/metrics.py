"""Evaluation-side ranking metrics: DCG, NDCG@k, Recall@k.

Rankings are arrays of candidate indices, best first. A list with no
relevant item scores 0 on both metrics and is counted as degenerate
rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Policy, RankedExample, target_perm_from_relevance


def dcg(relevance_along_ranking: Sequence[int] | np.ndarray, k: int) -> float:
    """Discounted cumulative gain of the first k entries: (2^y - 1) / log2(1 + i)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.asarray(relevance_along_ranking, dtype=np.float64)[:k]
    ranks = np.arange(1, rel.shape[0] + 1, dtype=np.float64)
    return float(np.sum((2.0**rel - 1.0) / np.log2(1.0 + ranks)))


def ideal_ranking(relevance: Sequence[int] | np.ndarray) -> np.ndarray:
    """Relevance-descending order with stable tie-break, as for target permutations."""
    return target_perm_from_relevance(relevance)


def ndcg_at_k(ranking: np.ndarray, relevance: np.ndarray, k: int) -> float:
    """DCG of the ranking's top k over the ideal ranking's; 0 if nothing is relevant."""
    relevance = np.asarray(relevance)
    ideal = dcg(relevance[ideal_ranking(relevance)], k)
    if ideal == 0.0:
        return 0.0
    return dcg(relevance[np.asarray(ranking)], k) / ideal


def recall_at_k(ranking: np.ndarray, relevance: np.ndarray, k: int) -> float:
    """Fraction of all relevant items appearing in the top k; 0 if none exist."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevance = np.asarray(relevance)
    total = int(np.sum(relevance >= 1))
    if total == 0:
        return 0.0
    hits = int(np.sum(relevance[np.asarray(ranking)[:k]] >= 1))
    return hits / total


@dataclass(frozen=True)
class MetricResult:
    """Per-example metric values at each cutoff plus their dataset means."""

    ndcg: dict[int, float]
    recall: dict[int, float]
    per_example_ndcg: dict[int, np.ndarray]
    per_example_recall: dict[int, np.ndarray]
    degenerate: int

    def to_json_dict(self) -> dict:
        return {
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "degenerate": self.degenerate,
        }


def policy_ranking(policy: Policy, example: RankedExample) -> np.ndarray:
    """Candidates ordered by descending policy score, stable on ties."""
    return np.argsort(-policy.scores(example), kind="stable")


def evaluate_rankings(
    rankings: Sequence[np.ndarray],
    examples: Sequence[RankedExample],
    ks: Sequence[int],
) -> MetricResult:
    per_ndcg = {k: np.empty(len(examples)) for k in ks}
    per_recall = {k: np.empty(len(examples)) for k in ks}
    degenerate = 0
    for idx, (ranking, ex) in enumerate(zip(rankings, examples)):
        if not np.any(ex.relevance >= 1):
            degenerate += 1
        for k in ks:
            per_ndcg[k][idx] = ndcg_at_k(ranking, ex.relevance, k)
            per_recall[k][idx] = recall_at_k(ranking, ex.relevance, k)
    return MetricResult(
        ndcg={k: float(per_ndcg[k].mean()) for k in ks},
        recall={k: float(per_recall[k].mean()) for k in ks},
        per_example_ndcg=per_ndcg,
        per_example_recall=per_recall,
        degenerate=degenerate,
    )


def evaluate_policy(
    policy: Policy, examples: Sequence[RankedExample], ks: Sequence[int]
) -> MetricResult:
    """Score the policy's greedy rankings over a dataset at each cutoff."""
    rankings = [policy_ranking(policy, ex) for ex in examples]
    return evaluate_rankings(rankings, examples, ks)
