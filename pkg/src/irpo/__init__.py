"""Listwise preference optimization over ranked candidate lists."""

from .data import (
    CandidateItem,
    DatasetError,
    Policy,
    PolicyError,
    RankedExample,
    SynthConfig,
    as_examples,
    ingest_jsonl,
    linear_policy,
    make_example,
    new_policy,
    planted_weights,
    synthesize,
    tabular_policy,
    write_jsonl,
)
from .gains import GAIN_KINDS, GainScheme, gain_weight, gain_weights
from .gradient import (
    EstimatorReport,
    GradientVector,
    gradient_check,
    importance_weights,
    irpo_grad,
    sampled_grad,
)
from .metrics import MetricResult, dcg, evaluate_policy, ndcg_at_k, recall_at_k
from .objective import (
    DivergenceError,
    LossReport,
    dpo_loss,
    irpo_loss,
    margin_z,
    sdpo_loss,
    sft_loss,
)
from .ranker import PreferenceRanker
from .trainer import (
    METHODS,
    TrainConfig,
    TrainTrace,
    pl_log_prob,
    sample_ranking_pl,
    train,
    train_iterative_irpo,
    train_offline,
    train_reinforce,
)

__version__ = "0.1.0"
