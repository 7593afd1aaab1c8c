"""Positional gain weights w(i) used by the listwise training objective.

Every scheme combines the relevance grade of the item the target
permutation places at rank i with a rank discount. Ranks are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RankedExample

NDCG = "ndcg"
PRECISION_AT_K = "precision_at_k"
MAP = "map"
MRR = "mrr"
EDCG = "edcg"
ABL_POSITION_ONLY = "abl_position_only"
ABL_LINEAR_DISCOUNT = "abl_linear_discount"

GAIN_KINDS = (NDCG, PRECISION_AT_K, MAP, MRR, EDCG, ABL_POSITION_ONLY, ABL_LINEAR_DISCOUNT)


@dataclass(frozen=True)
class GainScheme:
    """Selects one positional weight rule.

    k applies to precision_at_k only; lam is the exponential decay rate of
    edcg. mrr_per_item switches MRR from its default (weight only at the
    first relevant rank) to the literal per-item reading, 1/i at every
    relevant rank.
    """

    kind: str = NDCG
    k: int = 10
    lam: float = 0.5
    mrr_per_item: bool = False

    def __post_init__(self) -> None:
        if self.kind not in GAIN_KINDS:
            raise ValueError(f"unknown gain scheme {self.kind!r}; expected one of {GAIN_KINDS}")
        if self.kind == PRECISION_AT_K and self.k < 1:
            raise ValueError("precision_at_k requires k >= 1")
        if self.kind == EDCG and not self.lam > 0:
            raise ValueError("edcg requires lam > 0")


def gain_weights(scheme: GainScheme, example: RankedExample) -> np.ndarray:
    """All w(i) for ranks 1..n along the example's target permutation.

    MAP on a list with no relevant item yields all-zero weights rather than
    raising; callers flag such examples in their reports.
    """
    y = example.relevance_at_ranks().astype(np.float64)
    ranks = np.arange(1, example.n + 1, dtype=np.float64)
    exp_gain = 2.0**y - 1.0

    if scheme.kind == NDCG:
        return exp_gain / np.log2(1.0 + ranks)
    if scheme.kind == PRECISION_AT_K:
        return ((y >= 1) & (ranks <= scheme.k)).astype(np.float64)
    if scheme.kind == MAP:
        num_relevant = int(np.sum(y >= 1))
        if num_relevant == 0:
            return np.zeros(example.n)
        return exp_gain / num_relevant
    if scheme.kind == MRR:
        w = np.zeros(example.n)
        relevant = np.flatnonzero(y >= 1)
        if scheme.mrr_per_item:
            w[relevant] = 1.0 / ranks[relevant]
        elif relevant.size:
            first = relevant[0]
            w[first] = 1.0 / ranks[first]
        return w
    if scheme.kind == EDCG:
        return exp_gain / np.exp(scheme.lam * ranks)
    if scheme.kind == ABL_POSITION_ONLY:
        return 1.0 / np.log(1.0 + ranks)
    # ABL_LINEAR_DISCOUNT
    return exp_gain / ranks


def gain_weight(scheme: GainScheme, example: RankedExample, rank: int) -> float:
    """w(i) at a single 1-based rank."""
    if not 1 <= rank <= example.n:
        raise ValueError(f"rank {rank} out of range for n={example.n}")
    return float(gain_weights(scheme, example)[rank - 1])
