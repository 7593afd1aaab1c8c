"""Ranked-list examples, softmax policies over candidate lists, and dataset tooling.

A dataset is a list of prompts. Each prompt carries an ordered candidate
list, one non-negative integer relevance grade per candidate, and a target
permutation that orders candidates by descending relevance (stable ties).
Policies score candidates and normalize over the example's list with a
softmax: a linear policy scores by a weight vector against per-candidate
features, a tabular policy keeps one logit per (prompt, item) pair.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TABULAR = "tabular"
LINEAR = "linear"
POLICY_KINDS = (TABULAR, LINEAR)


class DatasetError(ValueError):
    """A dataset record violates the ranked-example contract."""


class PolicyError(ValueError):
    """A policy cannot score the example it was asked about."""


def target_perm_from_relevance(relevance: Sequence[int] | np.ndarray) -> np.ndarray:
    """Rank candidates by descending relevance, stable in original list order."""
    return np.argsort(-np.asarray(relevance), kind="stable")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CandidateItem:
    """One candidate in a ranked list; features are used only by linear policies."""

    item_id: str
    features: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class RankedExample:
    """One prompt with its candidate list, grades, and target ranking.

    ``target_perm[r]`` is the 0-based candidate index placed at rank
    ``r + 1``. Relevance must be non-increasing along it, so an explicit
    permutation may only reorder ties. On disk the permutation is 1-based
    (see :func:`example_to_record`). Compared by identity; use
    :meth:`equals` for a field-wise comparison.
    """

    prompt_id: str
    candidates: tuple[CandidateItem, ...]
    relevance: np.ndarray
    target_perm: np.ndarray

    @property
    def n(self) -> int:
        return len(self.candidates)

    @property
    def feature_dim(self) -> int | None:
        feats = self.candidates[0].features
        return None if feats is None else int(feats.shape[0])

    def feature_matrix(self) -> np.ndarray:
        if self.feature_dim is None:
            raise PolicyError(f"example {self.prompt_id!r} has no candidate features")
        cached = self.__dict__.get("_feature_matrix")
        if cached is None:
            cached = _frozen(np.stack([c.features for c in self.candidates]))
            self.__dict__["_feature_matrix"] = cached
        return cached

    def relevance_at_ranks(self) -> np.ndarray:
        """Relevance grades read off along the target permutation."""
        return self.relevance[self.target_perm]

    def equals(self, other: "RankedExample") -> bool:
        return (
            self.prompt_id == other.prompt_id
            and len(self.candidates) == len(other.candidates)
            and all(
                a.item_id == b.item_id
                and (
                    (a.features is None and b.features is None)
                    or (
                        a.features is not None
                        and b.features is not None
                        and np.array_equal(a.features, b.features)
                    )
                )
                for a, b in zip(self.candidates, other.candidates)
            )
            and np.array_equal(self.relevance, other.relevance)
            and np.array_equal(self.target_perm, other.target_perm)
        )


def make_example(
    prompt_id: str,
    candidates: Sequence[CandidateItem],
    relevance: Sequence[int] | np.ndarray,
    target_perm: Sequence[int] | np.ndarray | None = None,
) -> RankedExample:
    """Validate and build a :class:`RankedExample`.

    When ``target_perm`` is omitted it is derived from the relevance grades
    (descending, stable). Raises :class:`DatasetError` naming the prompt and
    the violated rule otherwise.
    """
    n = len(candidates)
    if n < 1:
        raise DatasetError(f"example {prompt_id!r}: candidate list is empty")

    seen = set()
    for cand in candidates:
        if cand.item_id in seen:
            raise DatasetError(
                f"example {prompt_id!r}: duplicate candidate item_id {cand.item_id!r}"
            )
        seen.add(cand.item_id)

    rel = np.asarray(relevance, dtype=np.int64)
    if rel.shape != (n,):
        raise DatasetError(
            f"example {prompt_id!r}: relevance length {rel.shape} != {n} candidates"
        )
    if np.any(rel < 0):
        raise DatasetError(f"example {prompt_id!r}: negative relevance grade")

    dims = {None if c.features is None else int(np.asarray(c.features).shape[0]) for c in candidates}
    if len(dims) > 1:
        raise DatasetError(
            f"example {prompt_id!r}: features must all be absent or share one dimension"
        )

    if target_perm is None:
        perm = target_perm_from_relevance(rel)
    else:
        perm = np.asarray(target_perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(n)):
            raise DatasetError(
                f"example {prompt_id!r}: target_perm is not a permutation of the list"
            )
        along = rel[perm]
        if np.any(np.diff(along) > 0):
            raise DatasetError(
                f"example {prompt_id!r}: relevance must be non-increasing along target_perm"
            )

    cands = tuple(
        CandidateItem(c.item_id, _frozen(np.asarray(c.features, dtype=np.float64)))
        if c.features is not None
        else c
        for c in candidates
    )
    return RankedExample(prompt_id, cands, _frozen(rel), _frozen(perm))


def as_examples(data: Iterable) -> list[RankedExample]:
    """Coerce an iterable of :class:`RankedExample` or JSON-style records.

    This is the input-validation entry point shared by the estimator and the
    CLI: records go through the full :func:`make_example` checks.
    """
    out = []
    for item in data:
        if isinstance(item, RankedExample):
            out.append(item)
        elif isinstance(item, Mapping):
            out.append(example_from_record(item))
        else:
            raise DatasetError(f"cannot interpret {type(item).__name__} as a ranked example")
    return out


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def example_from_record(rec: Mapping) -> RankedExample:
    try:
        prompt_id = rec["prompt_id"]
        raw_cands = rec["candidates"]
        relevance = rec["relevance"]
    except KeyError as exc:
        raise DatasetError(f"record missing required key {exc.args[0]!r}") from None
    candidates = [
        CandidateItem(
            c["item_id"],
            np.asarray(c["features"], dtype=np.float64) if c.get("features") is not None else None,
        )
        for c in raw_cands
    ]
    perm = rec.get("target_perm")
    if perm is not None:
        perm = np.asarray(perm, dtype=np.int64) - 1  # 1-based on disk
    return make_example(prompt_id, candidates, relevance, perm)


def example_to_record(ex: RankedExample) -> dict:
    cands = []
    for c in ex.candidates:
        entry: dict = {"item_id": c.item_id}
        if c.features is not None:
            entry["features"] = [float(v) for v in c.features]
        cands.append(entry)
    return {
        "prompt_id": ex.prompt_id,
        "candidates": cands,
        "relevance": [int(v) for v in ex.relevance],
        "target_perm": [int(v) + 1 for v in ex.target_perm],
    }


def ingest_jsonl(path: str | Path) -> list[RankedExample]:
    """Load a JSONL dataset, one example per line; reports offending line numbers."""
    examples = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            try:
                examples.append(example_from_record(rec))
            except DatasetError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
    return examples


def write_jsonl(examples: Iterable[RankedExample], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for ex in examples:
            handle.write(json.dumps(example_to_record(ex)) + "\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Policy:
    """Softmax policy over each example's candidate list.

    ``params`` is the flat float64 vector all gradients align with: one
    logit per known (prompt_id, item_id) pair for a tabular policy, a
    weight vector in feature space for a linear one. Parameters are the
    only mutable state; the tabular index is built once and shared.
    """

    kind: str
    params: np.ndarray
    index: dict[tuple[str, str], int] | None = None

    def __post_init__(self) -> None:
        # Slot lookups are memoized per example object; resampled lists are
        # new objects, so reordered candidates never alias a stale entry.
        self._slot_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    def copy(self) -> "Policy":
        """Independent parameter copy; a frozen reference twin shares the index."""
        return Policy(self.kind, self.params.copy(), self.index)

    def param_slots(self, example: RankedExample) -> np.ndarray:
        if self.kind != TABULAR:
            raise PolicyError("param_slots is only defined for tabular policies")
        slots = self._slot_cache.get(example)
        if slots is None:
            try:
                slots = np.array(
                    [self.index[(example.prompt_id, c.item_id)] for c in example.candidates],
                    dtype=np.int64,
                )
            except KeyError as exc:
                raise PolicyError(
                    f"unknown (prompt_id, item_id) pair {exc.args[0]!r} for tabular policy"
                ) from None
            self._slot_cache[example] = slots
        return slots

    def scores(self, example: RankedExample) -> np.ndarray:
        if self.kind == TABULAR:
            return self.params[self.param_slots(example)]
        feats = example.feature_matrix()
        if feats.shape[1] != self.params.shape[0]:
            raise PolicyError(
                f"example {example.prompt_id!r} has feature dim {feats.shape[1]}, "
                f"policy expects {self.params.shape[0]}"
            )
        return feats @ self.params

    def log_probs(self, example: RankedExample) -> np.ndarray:
        """Log-probability of every candidate: scores minus their log-sum-exp."""
        s = self.scores(example)
        peak = s.max()
        return s - (peak + np.log(np.exp(s - peak).sum()))

    def log_prob(self, example: RankedExample, j: int) -> float:
        """Log-probability of candidate ``j`` (0-based index into the list)."""
        if not 0 <= j < example.n:
            raise PolicyError(f"candidate index {j} out of range for n={example.n}")
        return float(self.log_probs(example)[j])

    def add_score_gradient(
        self, example: RankedExample, coeffs: np.ndarray, out: np.ndarray
    ) -> None:
        """Accumulate ``sum_j coeffs[j] * d score_j / d params`` into ``out``."""
        if self.kind == TABULAR:
            np.add.at(out, self.param_slots(example), coeffs)
        else:
            out += example.feature_matrix().T @ coeffs

    def to_json_dict(self) -> dict:
        d: dict = {"kind": self.kind, "params": [float(v) for v in self.params]}
        if self.index is not None:
            d["index"] = [[pid, iid, slot] for (pid, iid), slot in self.index.items()]
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "Policy":
        index = None
        if d.get("index") is not None:
            index = {(pid, iid): int(slot) for pid, iid, slot in d["index"]}
        return cls(d["kind"], np.asarray(d["params"], dtype=np.float64), index)


def tabular_policy(examples: Sequence[RankedExample]) -> Policy:
    """Zero-initialized tabular policy with one logit per (prompt, item) pair."""
    index: dict[tuple[str, str], int] = {}
    for ex in examples:
        for cand in ex.candidates:
            key = (ex.prompt_id, cand.item_id)
            if key not in index:
                index[key] = len(index)
    return Policy(TABULAR, np.zeros(len(index)), index)


def linear_policy(dim: int) -> Policy:
    return Policy(LINEAR, np.zeros(dim))


def new_policy(kind: str, examples: Sequence[RankedExample]) -> Policy:
    """Zero-initialized policy of the requested kind for this dataset."""
    if kind == TABULAR:
        return tabular_policy(examples)
    if kind == LINEAR:
        dim = examples[0].feature_dim
        if dim is None:
            raise PolicyError("linear policy requested but the dataset has no features")
        return linear_policy(dim)
    raise PolicyError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")


def save_policy(policy: Policy, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(policy.to_json_dict(), handle)
        handle.write("\n")


def load_policy(path: str | Path) -> Policy:
    with open(path, "r", encoding="utf-8") as handle:
        return Policy.from_json_dict(json.load(handle))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Controls for the synthetic ranked-list generator.

    ``grades`` is the grade multiset assigned (shuffled) to every list.
    With ``feature_dim > 0`` each candidate gets features whose component
    along a planted unit direction equals ``grade + noise * eps``, so the
    planted scorer orders items consistently with relevance up to ``noise``;
    the remaining directions are N(0, distractor_scale^2) distractors.
    """

    num_prompts: int
    list_size: int
    grades: tuple[int, ...]
    feature_dim: int = 0
    noise: float = 0.0
    distractor_scale: float = 1.0


def _check_synth(config: SynthConfig) -> None:
    if config.num_prompts < 1:
        raise DatasetError("num_prompts must be >= 1")
    if config.list_size < 2:
        raise DatasetError("list_size must be >= 2")
    if len(config.grades) != config.list_size:
        raise DatasetError(
            f"grade multiset has {len(config.grades)} entries for list_size {config.list_size}"
        )
    if config.noise < 0:
        raise DatasetError("noise must be >= 0")


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def planted_weights(config: SynthConfig, seed: int) -> np.ndarray | None:
    """The unit direction the generator plants; None when there are no features."""
    if config.feature_dim == 0:
        return None
    w_rng, _ = _rngs(seed)
    w = w_rng.normal(size=config.feature_dim)
    return w / np.linalg.norm(w)


def synthesize(config: SynthConfig, seed: int) -> list[RankedExample]:
    """Deterministically generate ``num_prompts`` ranked examples from ``seed``."""
    _check_synth(config)
    w_star = planted_weights(config, seed)
    _, rng = _rngs(seed)
    grades = np.asarray(config.grades, dtype=np.int64)
    n, d = config.list_size, config.feature_dim

    examples = []
    for p in range(config.num_prompts):
        rel = rng.permutation(grades)
        feats = None
        if d > 0:
            base = rng.normal(size=(n, d)) * config.distractor_scale
            signal = rel + config.noise * rng.normal(size=n)
            feats = base - np.outer(base @ w_star, w_star) + np.outer(signal, w_star)
        pid = f"p{p:05d}"
        cands = [
            CandidateItem(f"{pid}-c{j:02d}", feats[j] if feats is not None else None)
            for j in range(n)
        ]
        examples.append(make_example(pid, cands, rel))
    return examples


def grade_histogram(examples: Sequence[RankedExample]) -> dict[int, int]:
    """Total count of each grade across the dataset, highest grade first."""
    counts: dict[int, int] = {}
    for ex in examples:
        for g in ex.relevance:
            counts[int(g)] = counts.get(int(g), 0) + 1
    return dict(sorted(counts.items(), reverse=True))
