"""Gradient-descent training: offline losses, on-policy sampling, and a
score-function baseline.

All entry points are pure functions of (config, data, seed): plain gradient
descent, fixed-order reductions, and seeded generators throughout. The
reference policy is a deep copy of the initial policy; offline training
never touches it, the on-policy loop refreshes it each update unless
configured otherwise. A run that goes non-finite stops and returns the
parameters from the last step whose loss evaluated finite, with the trace
marked diverged.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import POLICY_KINDS, Policy, RankedExample, make_example, new_policy
from .gains import GainScheme
from .gradient import (
    dpo_value_and_grad,
    irpo_value_and_grad,
    sdpo_value_and_grad,
    sft_value_and_grad,
)
from .metrics import MetricResult, evaluate_policy, ndcg_at_k, policy_ranking
from .objective import DivergenceError

IRPO = "irpo"
DPO = "dpo"
SDPO = "sdpo"
SFT = "sft"
REINFORCE = "reinforce"
ITERATIVE_IRPO = "iterative_irpo"

OFFLINE_METHODS = (IRPO, DPO, SDPO, SFT)
METHODS = OFFLINE_METHODS + (REINFORCE, ITERATIVE_IRPO)


@dataclass(frozen=True)
class TrainConfig:
    method: str = IRPO
    beta: float = 1.0
    learning_rate: float = 0.1
    epochs: int = 1
    batch_size: int | None = None  # None trains on the full set each step
    gain: GainScheme = field(default_factory=GainScheme)
    clip_L: float = 10.0
    seed: int = 0
    eval_every: int = 10
    eval_ks: tuple[int, ...] = (1, 5, 10)
    policy_kind: str = "tabular"
    refresh_reference: bool = True  # on-policy loop only
    baseline_window: int = 50  # reward running-mean window

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 when given")
        if not self.clip_L > 0:
            raise ValueError("clip_L must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ValueError("eval_ks must be positive cutoffs")
        if self.policy_kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.policy_kind!r}")
        if self.baseline_window < 1:
            raise ValueError("baseline_window must be >= 1")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    ndcg: dict[int, float]
    recall: dict[int, float]


@dataclass
class TrainTrace:
    """Learning-curve records at strictly increasing step indices."""

    eval_ks: tuple[int, ...]
    records: list[TraceRecord] = field(default_factory=list)
    diverged: bool = False
    policy_eval_count: int = 0

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.records.append(record)

    def header(self) -> str:
        cols = ["step", "loss"]
        cols += [f"ndcg@{k}" for k in self.eval_ks]
        cols += [f"recall@{k}" for k in self.eval_ks]
        return ",".join(cols)

    def to_csv(self) -> str:
        lines = [self.header()]
        for rec in self.records:
            row = [str(rec.step), repr(rec.loss)]
            row += [repr(rec.ndcg[k]) for k in self.eval_ks]
            row += [repr(rec.recall[k]) for k in self.eval_ks]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _batches(
    n_examples: int, batch_size: int | None, rng: np.random.Generator
) -> list[np.ndarray]:
    if batch_size is None or batch_size >= n_examples:
        return [np.arange(n_examples)]
    order = rng.permutation(n_examples)
    return [order[i : i + batch_size] for i in range(0, n_examples, batch_size)]


def _record(
    trace: TrainTrace,
    step: int,
    loss: float,
    policy: Policy,
    eval_set: Sequence[RankedExample],
    ks: Sequence[int],
) -> None:
    result: MetricResult = evaluate_policy(policy, eval_set, ks)
    trace.append(TraceRecord(step, loss, result.ndcg, result.recall))


def _offline_value_and_grad(
    config: TrainConfig,
) -> Callable[[Policy, Policy, Sequence[RankedExample]], tuple[float, np.ndarray, int]]:
    if config.method == IRPO:
        return lambda theta, ref, batch: irpo_value_and_grad(
            theta, ref, batch, config.gain, config.beta
        )
    if config.method == DPO:
        return lambda theta, ref, batch: dpo_value_and_grad(theta, ref, batch, config.beta)
    if config.method == SDPO:
        return lambda theta, ref, batch: sdpo_value_and_grad(theta, ref, batch, config.beta)
    return lambda theta, ref, batch: sft_value_and_grad(theta, batch)


def train_offline(
    config: TrainConfig,
    train_set: Sequence[RankedExample],
    eval_set: Sequence[RankedExample],
    initial_policy: Policy | None = None,
) -> tuple[Policy, TrainTrace]:
    """Plain (mini-)batch gradient descent on the configured offline loss.

    The trace records the full-train-set loss and eval-set metrics at step
    0, every ``eval_every`` steps, and the final step. The reference is
    frozen as a copy of the initial policy (zero-initialized unless
    ``initial_policy`` is given). A fresh tabular policy indexes both
    datasets so held-out prompts are scorable; their logits stay at
    initialization because no training batch touches them.
    """
    if config.method not in OFFLINE_METHODS:
        raise ValueError(f"train_offline handles {OFFLINE_METHODS}, not {config.method!r}")
    if not train_set or not eval_set:
        raise ValueError("train_set and eval_set must be non-empty")

    policy = initial_policy.copy() if initial_policy else new_policy(
        config.policy_kind, [*train_set, *eval_set]
    )
    ref = policy.copy()
    fn = _offline_value_and_grad(config)
    rng = np.random.default_rng(config.seed)
    trace = TrainTrace(eval_ks=tuple(config.eval_ks))

    def full_loss() -> float:
        value, _, _ = fn(policy, ref, train_set)
        return value

    _record(trace, 0, full_loss(), policy, eval_set, config.eval_ks)
    step = 0
    checkpoint = policy.params.copy()
    for _ in range(config.epochs):
        for batch_idx in _batches(len(train_set), config.batch_size, rng):
            batch = [train_set[i] for i in batch_idx]
            try:
                _, grad, evals = fn(policy, ref, batch)
                if not np.all(np.isfinite(grad)):
                    raise DivergenceError(batch[0].prompt_id, what="gradient")
            except DivergenceError:
                trace.diverged = True
                policy.params[:] = checkpoint
                return policy, trace
            checkpoint = policy.params.copy()
            policy.params = policy.params - config.learning_rate * grad
            step += 1
            trace.policy_eval_count += evals
            if step % config.eval_every == 0:
                _record(trace, step, full_loss(), policy, eval_set, config.eval_ks)
    if trace.records[-1].step != step:
        _record(trace, step, full_loss(), policy, eval_set, config.eval_ks)
    return policy, trace


# ---------------------------------------------------------------------------
# Plackett-Luce sampling
# ---------------------------------------------------------------------------

def _as_generator(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_ranking_pl(
    policy: Policy, example: RankedExample, seed: int | np.random.Generator
) -> np.ndarray:
    """Sample a full ranking: sequential choice without replacement, each pick
    proportional to exp(score). Drawn with the Gumbel-max trick, which
    induces exactly that distribution."""
    rng = _as_generator(seed)
    scores = policy.scores(example)
    return np.argsort(-(scores + rng.gumbel(size=example.n)), kind="stable")


def _reverse_lse(values: np.ndarray) -> np.ndarray:
    """Entry t is log sum exp(values[t:])."""
    return np.logaddexp.accumulate(values[::-1])[::-1]


def pl_log_prob(policy: Policy, example: RankedExample, ranking: np.ndarray) -> float:
    """Log-probability of a full ranking: per pick, log-softmax over what remains."""
    s = policy.scores(example)[np.asarray(ranking)]
    return float(np.sum(s - _reverse_lse(s)))


def pl_score_coeffs(policy: Policy, example: RankedExample, ranking: np.ndarray) -> np.ndarray:
    """d log P(ranking) / d score_j for every candidate j."""
    ranking = np.asarray(ranking)
    s = policy.scores(example)[ranking]
    lse = _reverse_lse(s)
    along = np.ones(example.n)
    for t in range(example.n):
        along[t:] -= np.exp(s[t:] - lse[t])
    coeffs = np.empty(example.n)
    coeffs[ranking] = along
    return coeffs


def _resample_example(
    policy: Policy, example: RankedExample, rng: np.random.Generator
) -> RankedExample:
    """Sampled list relabeled with ground-truth grades; the target permutation
    is rebuilt by descending relevance, so sampled order only breaks ties."""
    perm = sample_ranking_pl(policy, example, rng)
    cands = tuple(example.candidates[int(j)] for j in perm)
    return make_example(example.prompt_id, cands, example.relevance[perm])


# ---------------------------------------------------------------------------
# On-policy loops
# ---------------------------------------------------------------------------

def train_iterative_irpo(
    config: TrainConfig,
    train_set: Sequence[RankedExample],
    eval_set: Sequence[RankedExample],
    initial_policy: Policy | None = None,
) -> tuple[Policy, TrainTrace]:
    """On-policy loop: sample rankings from the current policy, relabel them
    with ground-truth relevance, and take one listwise update per batch.

    The reference is refreshed to the pre-update policy every step unless
    ``refresh_reference`` is off. The trace loss is measured on the original
    lists against the initial reference, so the curve stays comparable
    across iterations.
    """
    if config.method != ITERATIVE_IRPO:
        raise ValueError(f"train_iterative_irpo requires method={ITERATIVE_IRPO!r}")
    if not train_set or not eval_set:
        raise ValueError("train_set and eval_set must be non-empty")

    policy = initial_policy.copy() if initial_policy else new_policy(
        config.policy_kind, [*train_set, *eval_set]
    )
    initial_ref = policy.copy()
    ref = policy.copy()
    rng = np.random.default_rng(config.seed)
    trace = TrainTrace(eval_ks=tuple(config.eval_ks))

    def trace_loss() -> float:
        value, _, _ = irpo_value_and_grad(policy, initial_ref, train_set, config.gain, config.beta)
        return value

    _record(trace, 0, trace_loss(), policy, eval_set, config.eval_ks)
    step = 0
    checkpoint = policy.params.copy()
    for _ in range(config.epochs):
        for batch_idx in _batches(len(train_set), config.batch_size, rng):
            if config.refresh_reference:
                ref = policy.copy()
            batch = [_resample_example(policy, train_set[i], rng) for i in batch_idx]
            try:
                _, grad, evals = irpo_value_and_grad(policy, ref, batch, config.gain, config.beta)
                if not np.all(np.isfinite(grad)):
                    raise DivergenceError(batch[0].prompt_id, what="gradient")
            except DivergenceError:
                trace.diverged = True
                policy.params[:] = checkpoint
                return policy, trace
            checkpoint = policy.params.copy()
            policy.params = policy.params - config.learning_rate * grad
            step += 1
            trace.policy_eval_count += evals
            if step % config.eval_every == 0:
                _record(trace, step, trace_loss(), policy, eval_set, config.eval_ks)
    if trace.records[-1].step != step:
        _record(trace, step, trace_loss(), policy, eval_set, config.eval_ks)
    return policy, trace


def train_reinforce(
    config: TrainConfig,
    train_set: Sequence[RankedExample],
    eval_set: Sequence[RankedExample],
    initial_policy: Policy | None = None,
) -> tuple[Policy, TrainTrace]:
    """Score-function baseline: sample a ranking per list, reward it with its
    full-list NDCG, and ascend (reward - running mean) times the ranking's
    log-likelihood gradient. The trace loss is the negative mean NDCG of the
    policy's greedy rankings on the training set."""
    if config.method != REINFORCE:
        raise ValueError(f"train_reinforce requires method={REINFORCE!r}")
    if not train_set or not eval_set:
        raise ValueError("train_set and eval_set must be non-empty")

    policy = initial_policy.copy() if initial_policy else new_policy(
        config.policy_kind, [*train_set, *eval_set]
    )
    rng = np.random.default_rng(config.seed)
    trace = TrainTrace(eval_ks=tuple(config.eval_ks))
    rewards: deque[float] = deque(maxlen=config.baseline_window)

    def trace_loss() -> float:
        values = [
            ndcg_at_k(policy_ranking(policy, ex), ex.relevance, ex.n) for ex in train_set
        ]
        return -float(np.mean(values))

    _record(trace, 0, trace_loss(), policy, eval_set, config.eval_ks)
    step = 0
    checkpoint = policy.params.copy()
    for _ in range(config.epochs):
        for batch_idx in _batches(len(train_set), config.batch_size, rng):
            grad = np.zeros_like(policy.params)
            for i in batch_idx:
                ex = train_set[i]
                ranking = sample_ranking_pl(policy, ex, rng)
                reward = ndcg_at_k(ranking, ex.relevance, ex.n)
                baseline = float(np.mean(rewards)) if rewards else 0.0
                coeffs = pl_score_coeffs(policy, ex, ranking)
                policy.add_score_gradient(
                    ex, -(reward - baseline) / len(batch_idx) * coeffs, grad
                )
                rewards.append(reward)
                trace.policy_eval_count += ex.n
            if not np.all(np.isfinite(grad)):
                trace.diverged = True
                policy.params[:] = checkpoint
                return policy, trace
            checkpoint = policy.params.copy()
            policy.params = policy.params - config.learning_rate * grad
            step += 1
            if step % config.eval_every == 0:
                _record(trace, step, trace_loss(), policy, eval_set, config.eval_ks)
    if trace.records[-1].step != step:
        _record(trace, step, trace_loss(), policy, eval_set, config.eval_ks)
    return policy, trace


def train(
    config: TrainConfig,
    train_set: Sequence[RankedExample],
    eval_set: Sequence[RankedExample],
    initial_policy: Policy | None = None,
) -> tuple[Policy, TrainTrace]:
    """Dispatch to the loop matching ``config.method``."""
    if config.method in OFFLINE_METHODS:
        return train_offline(config, train_set, eval_set, initial_policy)
    if config.method == ITERATIVE_IRPO:
        return train_iterative_irpo(config, train_set, eval_set, initial_policy)
    return train_reinforce(config, train_set, eval_set, initial_policy)
