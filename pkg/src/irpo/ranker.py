"""Scikit-learn style estimator over the training loops.

``PreferenceRanker`` follows the fit/predict/get_params contract so the
trainer composes with sklearn tooling (clone, grid search over its
parameters, pipelines that end in a ranker). X is a sequence of ranked
examples or JSON-style record dicts; relevance labels travel inside the
examples, so y stays None.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import LINEAR, RankedExample, as_examples
from .gains import GainScheme
from .metrics import evaluate_policy, policy_ranking
from .trainer import METHODS, TrainConfig, train


class PreferenceRanker(BaseEstimator):
    """Fits a list-softmax policy to ranked-list preference data.

    Parameters mirror the training configuration; ``gain``/``gain_k``/
    ``gain_lam`` select the positional weighting of the listwise loss.
    ``policy`` is "tabular", "linear", or None to pick "linear" exactly
    when the data carries features. After ``fit`` the learned policy is in
    ``policy_`` and the learning curve in ``trace_``.
    """

    def __init__(
        self,
        method: str = "irpo",
        gain: str = "ndcg",
        gain_k: int = 10,
        gain_lam: float = 0.5,
        beta: float = 1.0,
        learning_rate: float = 0.1,
        epochs: int = 50,
        batch_size: int | None = None,
        clip_L: float = 10.0,
        seed: int = 0,
        eval_every: int = 10,
        eval_ks: tuple[int, ...] = (1, 5, 10),
        policy: str | None = None,
        refresh_reference: bool = True,
        score_k: int = 10,
    ):
        self.method = method
        self.gain = gain
        self.gain_k = gain_k
        self.gain_lam = gain_lam
        self.beta = beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_L = clip_L
        self.seed = seed
        self.eval_every = eval_every
        self.eval_ks = eval_ks
        self.policy = policy
        self.refresh_reference = refresh_reference
        self.score_k = score_k

    def _config(self, examples: Sequence[RankedExample]) -> TrainConfig:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        kind = self.policy
        if kind is None:
            kind = LINEAR if examples[0].feature_dim is not None else "tabular"
        return TrainConfig(
            method=self.method,
            beta=self.beta,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            gain=GainScheme(kind=self.gain, k=self.gain_k, lam=self.gain_lam),
            clip_L=self.clip_L,
            seed=self.seed,
            eval_every=self.eval_every,
            eval_ks=tuple(self.eval_ks),
            policy_kind=kind,
            refresh_reference=self.refresh_reference,
        )

    def fit(self, X: Iterable, y=None, eval_set: Iterable | None = None) -> "PreferenceRanker":
        """Train on ranked examples; ``eval_set`` defaults to the training data."""
        examples = as_examples(X)
        if not examples:
            raise ValueError("X must contain at least one ranked example")
        held_out = as_examples(eval_set) if eval_set is not None else examples
        config = self._config(examples)
        self.policy_, self.trace_ = train(config, examples, held_out)
        self.n_params_ = int(self.policy_.params.shape[0])
        return self

    def predict(self, X: Iterable) -> list[np.ndarray]:
        """Ranking per example: candidate indices by descending learned score."""
        check_is_fitted(self, "policy_")
        return [policy_ranking(self.policy_, ex) for ex in as_examples(X)]

    def score(self, X: Iterable, y=None) -> float:
        """Mean NDCG at ``score_k`` of the learned policy's rankings."""
        check_is_fitted(self, "policy_")
        examples = as_examples(X)
        return evaluate_policy(self.policy_, examples, [self.score_k]).ndcg[self.score_k]
