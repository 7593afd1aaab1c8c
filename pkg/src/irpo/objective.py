"""Training losses over ranked lists.

The listwise loss scores each rank i of the target permutation by a margin

    z_i = -log sum_j exp(beta * (delta_j - delta_tau(i))),
    delta_j = log pi_theta(e_j | x) - log pi_ref(e_j | x),

and charges -log sigmoid(z_i) weighted by the positional gain w(i). The sum
over j includes j = tau(i), so z_i <= 0 always. The row of importance
weights at rank i is the softmax of beta * delta; the rank offset cancels
in the normalization, so every row of the matrix coincides.

Pairwise and multi-negative baselines (dpo, sdpo) and plain negative
log-likelihood (sft) share the report type. ``policy_eval_count`` tallies
how many candidate log-probabilities each loss evaluates under the trained
policy (reference evaluations are not counted): n per example for the
listwise loss, 2 per pair for dpo, 1 + #negatives for sdpo, 1 for sft.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .data import Policy, RankedExample
from .gains import GainScheme, gain_weights


class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite; names the offending example."""

    def __init__(self, prompt_id: str, what: str = "loss"):
        super().__init__(f"non-finite {what} on example {prompt_id!r} (parameter blow-up?)")
        self.prompt_id = prompt_id


@dataclass(frozen=True)
class PositionDiagnostics:
    """Per-rank values for one example: w(i), z_i, sigmoid(z_i)."""

    weights: np.ndarray
    margins: np.ndarray
    sigmoids: np.ndarray


@dataclass
class LossReport:
    """Batch loss plus per-position diagnostics and evaluation accounting.

    ``rho`` holds one row-stochastic importance-weight matrix per example
    for the losses that have one. ``skipped`` counts examples a pairwise
    loss could not use (no relevant or no irrelevant candidate) and
    ``zero_weight_examples`` counts examples whose gain weights are all
    zero (e.g. map with nothing relevant), which contribute zero loss.
    """

    loss: float
    per_position: list[PositionDiagnostics] = field(default_factory=list)
    rho: list[np.ndarray] = field(default_factory=list)
    policy_eval_count: int = 0
    skipped: int = 0
    zero_weight_examples: int = 0


def log_ratio_deltas(theta: Policy, ref: Policy, example: RankedExample) -> np.ndarray:
    """delta_j = log pi_theta(e_j|x) - log pi_ref(e_j|x) for every candidate."""
    return theta.log_probs(example) - ref.log_probs(example)


def margins_from_deltas(deltas: np.ndarray, target_perm: np.ndarray, beta: float) -> np.ndarray:
    """All rank margins z_i from a delta vector; stable log-sum-exp form."""
    b = beta * np.asarray(deltas, dtype=np.float64)
    return b[target_perm] - logsumexp(b)


def margin_z(theta: Policy, ref: Policy, example: RankedExample, rank: int, beta: float) -> float:
    """z at one 1-based rank; always <= 0 because the self term contributes exp(0)."""
    if not 1 <= rank <= example.n:
        raise ValueError(f"rank {rank} out of range for n={example.n}")
    deltas = log_ratio_deltas(theta, ref, example)
    return float(margins_from_deltas(deltas, example.target_perm, beta)[rank - 1])


def rho_matrix_from_deltas(deltas: np.ndarray, beta: float) -> np.ndarray:
    """The n x n importance-weight matrix; all rows equal softmax(beta * delta)."""
    row = softmax(beta * np.asarray(deltas, dtype=np.float64))
    return np.tile(row, (row.shape[0], 1))


def _softplus(x: np.ndarray | float) -> np.ndarray | float:
    # -log sigmoid(z) == softplus(-z)
    return np.logaddexp(0.0, x)


def positive_index(example: RankedExample) -> int:
    """Candidate index of the top-relevance item (first of the target perm)."""
    return int(example.target_perm[0])


def negative_indices(example: RankedExample) -> np.ndarray:
    """Candidate indices with zero relevance, in list order."""
    return np.flatnonzero(example.relevance == 0)


def preference_pairs(example: RankedExample) -> list[tuple[int, int]]:
    """(positive, negative) index pairs: the top item against each zero-grade item."""
    pos = positive_index(example)
    if example.relevance[pos] < 1:
        return []
    return [(pos, int(neg)) for neg in negative_indices(example)]


def irpo_loss(
    theta: Policy,
    ref: Policy,
    batch: list[RankedExample],
    scheme: GainScheme,
    beta: float,
) -> LossReport:
    """Gain-weighted listwise loss, mean over the batch.

    Per example: sum_i w(i) * (-log sigmoid(z_i)), with all n candidate
    log-probabilities evaluated once and reused across ranks.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    report = LossReport(loss=0.0)
    for ex in batch:
        deltas = log_ratio_deltas(theta, ref, ex)
        report.policy_eval_count += ex.n
        z = margins_from_deltas(deltas, ex.target_perm, beta)
        w = gain_weights(scheme, ex)
        value = float(np.dot(w, _softplus(-z)))
        if not np.isfinite(value):
            raise DivergenceError(ex.prompt_id)
        total += value
        if not w.any():
            report.zero_weight_examples += 1
        report.per_position.append(
            PositionDiagnostics(w, z, 1.0 / (1.0 + np.exp(-z)))
        )
        report.rho.append(rho_matrix_from_deltas(deltas, beta))
    report.loss = total / len(batch)
    return report


def dpo_loss(theta: Policy, ref: Policy, batch: list[RankedExample], beta: float) -> LossReport:
    """Pairwise log-ratio margin loss, mean over all (positive, negative) pairs.

    Examples without a relevant or without a zero-grade candidate are
    skipped and counted.
    """
    terms = []
    margins = []
    report = LossReport(loss=0.0)
    for ex in batch:
        pairs = preference_pairs(ex)
        if not pairs:
            report.skipped += 1
            continue
        ref_lp = ref.log_probs(ex)
        for pos, neg in pairs:
            delta_w = theta.log_prob(ex, pos) - ref_lp[pos]
            delta_l = theta.log_prob(ex, neg) - ref_lp[neg]
            report.policy_eval_count += 2
            m = beta * (delta_w - delta_l)
            terms.append(float(_softplus(-m)))
            margins.append(m)
        if not np.isfinite(terms[-1]):
            raise DivergenceError(ex.prompt_id)
    if terms:
        report.loss = float(np.mean(terms))
        m = np.asarray(margins)
        report.per_position.append(
            PositionDiagnostics(np.ones_like(m), m, 1.0 / (1.0 + np.exp(-m)))
        )
    return report


def sdpo_loss(theta: Policy, ref: Policy, batch: list[RankedExample], beta: float) -> LossReport:
    """Multi-negative softmax margin loss, mean over usable examples.

    z = -log sum_{j in negatives} exp(beta * (delta_j - delta_pos)); unlike
    the listwise margin the sum excludes the positive itself, so z can be
    positive and the loss can go below log 2.
    """
    terms = []
    report = LossReport(loss=0.0)
    for ex in batch:
        pos = positive_index(ex)
        negs = negative_indices(ex)
        if ex.relevance[pos] < 1 or negs.size == 0:
            report.skipped += 1
            continue
        ref_lp = ref.log_probs(ex)
        delta_pos = theta.log_prob(ex, pos) - ref_lp[pos]
        delta_negs = np.array([theta.log_prob(ex, int(j)) - ref_lp[j] for j in negs])
        report.policy_eval_count += 1 + negs.size
        gaps = beta * (delta_negs - delta_pos)
        z = -logsumexp(gaps)
        value = float(_softplus(-z))
        if not np.isfinite(value):
            raise DivergenceError(ex.prompt_id)
        terms.append(value)
        report.per_position.append(
            PositionDiagnostics(
                np.array([1.0]), np.array([z]), np.array([1.0 / (1.0 + np.exp(-z))])
            )
        )
        report.rho.append(softmax(gaps)[None, :])
    if terms:
        report.loss = float(np.mean(terms))
    return report


def sft_loss(theta: Policy, batch: list[RankedExample]) -> LossReport:
    """Negative log-likelihood of each example's top-relevance candidate."""
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    report = LossReport(loss=0.0)
    for ex in batch:
        value = -theta.log_prob(ex, positive_index(ex))
        report.policy_eval_count += 1
        if not np.isfinite(value):
            raise DivergenceError(ex.prompt_id)
        total += value
    report.loss = total / len(batch)
    return report
