"""Analytic loss gradients, the rank-level sampling estimator, and checks.

For a softmax policy the gradient of every implemented loss is a linear
combination of per-candidate score gradients. The listwise loss gradient is

    beta * sum_i w(i) * sigmoid(-z_i) * sum_j rho_ij * (grad s_j - grad s_tau(i)),

where the softmax-mean part of each grad log pi cancels inside the
difference, so the policy only has to accumulate score gradients. The
reference policy enters through its log-probabilities alone and is never
differentiated.

The rank-level estimator draws candidates from the importance-weight row
at a rank and averages clipped score-gradient differences; its report
carries the deviation bound ``clip_L * sqrt(max(rho) / n)``, which the
m-sample average satisfies once m >= n / max(rho).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from .data import Policy, RankedExample
from .gains import GainScheme, gain_weights
from .objective import (
    DivergenceError,
    log_ratio_deltas,
    margins_from_deltas,
    negative_indices,
    positive_index,
    preference_pairs,
)


@dataclass(frozen=True)
class GradientVector:
    """Flat gradient aligned with ``Policy.params``; rejects non-finite entries."""

    values: np.ndarray

    def __post_init__(self) -> None:
        bad = np.flatnonzero(~np.isfinite(self.values))
        if bad.size:
            raise DivergenceError(f"parameter index {int(bad[0])}", what="gradient entry")


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Loss values and gradients used by the training loop
# ---------------------------------------------------------------------------

def irpo_value_and_grad(
    theta: Policy,
    ref: Policy,
    batch: Sequence[RankedExample],
    scheme: GainScheme,
    beta: float,
) -> tuple[float, np.ndarray, int]:
    """(mean loss, mean gradient, policy evaluation count) for the listwise loss."""
    grad = np.zeros_like(theta.params)
    total = 0.0
    evals = 0
    for ex in batch:
        deltas = log_ratio_deltas(theta, ref, ex)
        evals += ex.n
        z = margins_from_deltas(deltas, ex.target_perm, beta)
        w = gain_weights(scheme, ex)
        total += float(np.dot(w, np.logaddexp(0.0, -z)))
        s = w * _sigmoid(-z)  # per-rank pull strength
        rho = softmax(beta * deltas)
        coeffs = beta * s.sum() * rho
        coeffs[ex.target_perm] -= beta * s
        theta.add_score_gradient(ex, coeffs / len(batch), grad)
    loss = total / len(batch)
    if not np.isfinite(loss):
        raise DivergenceError(batch[0].prompt_id)
    return loss, grad, evals


def dpo_value_and_grad(
    theta: Policy, ref: Policy, batch: Sequence[RankedExample], beta: float
) -> tuple[float, np.ndarray, int]:
    """Pairwise loss averaged over all usable (positive, negative) pairs."""
    grad = np.zeros_like(theta.params)
    terms = []
    evals = 0
    contributions = []  # (example, pos, neg, sigmoid of -margin)
    for ex in batch:
        pairs = preference_pairs(ex)
        if not pairs:
            continue
        ref_lp = ref.log_probs(ex)
        for pos, neg in pairs:
            delta_w = theta.log_prob(ex, pos) - ref_lp[pos]
            delta_l = theta.log_prob(ex, neg) - ref_lp[neg]
            evals += 2
            m = beta * (delta_w - delta_l)
            terms.append(float(np.logaddexp(0.0, -m)))
            contributions.append((ex, pos, neg, float(_sigmoid(-m))))
    if not terms:
        return 0.0, grad, evals
    scale = 1.0 / len(terms)
    for ex, pos, neg, pull in contributions:
        coeffs = np.zeros(ex.n)
        coeffs[pos] = -beta * pull * scale
        coeffs[neg] = beta * pull * scale
        theta.add_score_gradient(ex, coeffs, grad)
    loss = float(np.mean(terms))
    if not np.isfinite(loss):
        raise DivergenceError(batch[0].prompt_id)
    return loss, grad, evals


def sdpo_value_and_grad(
    theta: Policy, ref: Policy, batch: Sequence[RankedExample], beta: float
) -> tuple[float, np.ndarray, int]:
    """Multi-negative softmax margin loss averaged over usable examples."""
    grad = np.zeros_like(theta.params)
    terms = []
    contributions = []
    evals = 0
    for ex in batch:
        pos = positive_index(ex)
        negs = negative_indices(ex)
        if ex.relevance[pos] < 1 or negs.size == 0:
            continue
        ref_lp = ref.log_probs(ex)
        delta_pos = theta.log_prob(ex, pos) - ref_lp[pos]
        delta_negs = np.array([theta.log_prob(ex, int(j)) - ref_lp[j] for j in negs])
        evals += 1 + negs.size
        gaps = beta * (delta_negs - delta_pos)
        peak = gaps.max()
        z = -(peak + np.log(np.exp(gaps - peak).sum()))
        terms.append(float(np.logaddexp(0.0, -z)))
        contributions.append((ex, pos, negs, softmax(gaps), float(_sigmoid(-z))))
    if not terms:
        return 0.0, grad, evals
    scale = 1.0 / len(terms)
    for ex, pos, negs, neg_weights, pull in contributions:
        coeffs = np.zeros(ex.n)
        coeffs[negs] = beta * pull * neg_weights * scale
        coeffs[pos] = -beta * pull * scale
        theta.add_score_gradient(ex, coeffs, grad)
    loss = float(np.mean(terms))
    if not np.isfinite(loss):
        raise DivergenceError(batch[0].prompt_id)
    return loss, grad, evals


def sft_value_and_grad(
    theta: Policy, batch: Sequence[RankedExample]
) -> tuple[float, np.ndarray, int]:
    """Mean negative log-likelihood of the top-relevance candidates."""
    grad = np.zeros_like(theta.params)
    total = 0.0
    evals = 0
    for ex in batch:
        pos = positive_index(ex)
        log_probs = theta.log_probs(ex)
        evals += 1
        total += -float(log_probs[pos])
        coeffs = np.exp(log_probs)
        coeffs[pos] -= 1.0
        theta.add_score_gradient(ex, coeffs / len(batch), grad)
    loss = total / len(batch)
    if not np.isfinite(loss):
        raise DivergenceError(batch[0].prompt_id)
    return loss, grad, evals


def irpo_grad(
    theta: Policy,
    ref: Policy,
    batch: Sequence[RankedExample],
    scheme: GainScheme,
    beta: float,
) -> GradientVector:
    """Analytic gradient of the listwise loss with respect to ``theta.params``."""
    _, grad, _ = irpo_value_and_grad(theta, ref, batch, scheme, beta)
    return GradientVector(grad)


# ---------------------------------------------------------------------------
# Importance weights and the rank-level sampling estimator
# ---------------------------------------------------------------------------

def importance_weights(
    theta: Policy, ref: Policy, example: RankedExample, rank: int, beta: float
) -> np.ndarray:
    """The importance-weight row at a 1-based rank: a stable softmax, sums to 1.

    The rank only shifts every exponent by the same constant, so all rows
    coincide; the argument is validated and kept for the record.
    """
    if not 1 <= rank <= example.n:
        raise ValueError(f"rank {rank} out of range for n={example.n}")
    deltas = log_ratio_deltas(theta, ref, example)
    offset = deltas[example.target_perm[rank - 1]]
    return softmax(beta * (deltas - offset))


def _score_grad_columns(theta: Policy, example: RankedExample) -> np.ndarray:
    """Dense (n, P) matrix of per-candidate score gradients."""
    cols = np.zeros((example.n, theta.params.shape[0]))
    for j in range(example.n):
        onehot = np.zeros(example.n)
        onehot[j] = 1.0
        theta.add_score_gradient(example, onehot, cols[j])
    return cols


def grad_diff_vectors(theta: Policy, example: RankedExample, rank: int) -> np.ndarray:
    """Rows are grad log pi(e_j) - grad log pi(e_at_rank); softmax means cancel."""
    cols = _score_grad_columns(theta, example)
    return cols - cols[example.target_perm[rank - 1]]


def max_grad_diff_norm(theta: Policy, example: RankedExample, rank: int) -> float:
    """Largest L2 norm among the rank's gradient-difference vectors."""
    return float(np.max(np.linalg.norm(grad_diff_vectors(theta, example, rank), axis=1)))


def rank_term_grad(
    theta: Policy, ref: Policy, example: RankedExample, rank: int, beta: float
) -> np.ndarray:
    """Exact importance-weighted gradient term at one rank (no clipping)."""
    rho = importance_weights(theta, ref, example, rank, beta)
    coeffs = rho.copy()
    coeffs[example.target_perm[rank - 1]] -= 1.0
    out = np.zeros_like(theta.params)
    theta.add_score_gradient(example, coeffs, out)
    return out


@dataclass(frozen=True)
class EstimatorReport:
    """One m-sample run of the rank-level estimator against its exact target."""

    g_exact: GradientVector
    g_sampled_mean: GradientVector
    samples: int
    max_abs_dev: float
    l2_deviation: float
    bound: float
    clip_L: float
    rho_max: float

    def to_json_dict(self) -> dict:
        return {
            "samples": self.samples,
            "max_abs_dev": self.max_abs_dev,
            "l2_deviation": self.l2_deviation,
            "bound": self.bound,
            "clip_L": self.clip_L,
            "rho_max": self.rho_max,
            "g_exact": [float(v) for v in self.g_exact.values],
            "g_sampled_mean": [float(v) for v in self.g_sampled_mean.values],
        }


def sampled_grad(
    theta: Policy,
    ref: Policy,
    example: RankedExample,
    rank: int,
    beta: float,
    m: int,
    seed: int,
    clip_L: float = 10.0,
) -> EstimatorReport:
    """Draw m candidates from the rank's importance weights and average.

    Each draw contributes the gradient-difference vector of the drawn
    candidate, L2-clipped to ``clip_L``. Deterministic given ``seed``; the
    exact target in the report is unclipped.
    """
    if m < 1:
        raise ValueError("sample count m must be >= 1")
    if not clip_L > 0:
        raise ValueError("clip_L must be > 0")
    rho = importance_weights(theta, ref, example, rank, beta)
    vectors = grad_diff_vectors(theta, example, rank)
    g_exact = rho @ vectors

    norms = np.linalg.norm(vectors, axis=1)
    clipped = vectors * np.where(norms > clip_L, clip_L / np.maximum(norms, 1e-300), 1.0)[:, None]

    rng = np.random.default_rng(seed)
    counts = np.bincount(rng.choice(example.n, size=m, p=rho), minlength=example.n)
    g_mean = (counts / m) @ clipped

    dev = g_mean - g_exact
    return EstimatorReport(
        g_exact=GradientVector(g_exact),
        g_sampled_mean=GradientVector(g_mean),
        samples=m,
        max_abs_dev=float(np.max(np.abs(dev))),
        l2_deviation=float(np.linalg.norm(dev)),
        bound=float(clip_L * np.sqrt(rho.max() / example.n)),
        clip_L=float(clip_L),
        rho_max=float(rho.max()),
    )


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def fd_gradient(fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of the parameter vector."""
    grad = np.zeros_like(params)
    for k in range(params.size):
        shift = np.zeros_like(params)
        shift[k] = h
        grad[k] = (fn(params + shift) - fn(params - shift)) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    threshold: float
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst_index": self.worst_index,
            "threshold": self.threshold,
            "pass": self.passed,
        }


def gradient_check(
    theta: Policy,
    ref: Policy,
    batch: Sequence[RankedExample],
    scheme: GainScheme,
    beta: float,
    h: float = 1e-5,
    threshold: float = 1e-6,
    min_magnitude: float = 1e-8,
) -> GradCheckReport:
    """Compare the analytic listwise gradient against central differences.

    Relative error is measured per coordinate against the larger of the two
    magnitudes; coordinates where both are below ``min_magnitude`` are
    ignored.
    """

    def loss_at(p: np.ndarray) -> float:
        probe = Policy(theta.kind, p, theta.index)
        value, _, _ = irpo_value_and_grad(probe, ref, batch, scheme, beta)
        return value

    analytic = irpo_grad(theta, ref, batch, scheme, beta).values
    numeric = fd_gradient(loss_at, theta.params, h)

    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > min_magnitude
    rel = np.zeros_like(scale)
    rel[mask] = np.abs(analytic - numeric)[mask] / scale[mask]
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel, worst, threshold, max_rel < threshold)
