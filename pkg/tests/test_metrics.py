import itertools

import numpy as np
import pytest

from irpo.data import CandidateItem, make_example
from irpo.metrics import (
    dcg,
    evaluate_policy,
    evaluate_rankings,
    ideal_ranking,
    ndcg_at_k,
    recall_at_k,
)
from tests.conftest import build_tabular_instance


class TestDcg:
    def test_hand_value(self):
        # (2,1,0) at k=3: 3/log2(2) + 1/log2(3) + 0, from a direct calculator
        assert dcg([2, 1, 0], 3) == pytest.approx(3.6309297535714578, abs=1e-12)

    def test_all_zero(self):
        assert dcg([0, 0, 0], 3) == 0.0

    def test_top_one(self):
        assert dcg([1, 2, 2], 1) == 1.0

    def test_k_beyond_length(self):
        assert dcg([1], 10) == 1.0

    def test_k_validated(self):
        with pytest.raises(ValueError):
            dcg([1], 0)


class TestNdcg:
    def test_ideal_is_one(self):
        rel = np.array([0, 2, 1, 0])
        assert ndcg_at_k(ideal_ranking(rel), rel, 4) == 1.0

    def test_single_relevant_at_rank_two(self):
        rel = np.array([1, 0])
        ranking = np.array([1, 0])  # relevant item second
        assert ndcg_at_k(ranking, rel, 2) == pytest.approx(0.6309297535714575, abs=1e-12)

    def test_no_relevant_items_zero(self):
        rel = np.array([0, 0])
        assert ndcg_at_k(np.array([0, 1]), rel, 2) == 0.0

    def test_bounded_by_one_with_equality_iff_gain_equal_topk(self):
        rel = np.array([2, 1, 1, 0])
        k = 2
        ideal_gain = tuple(sorted(rel, reverse=True)[:k])
        for perm in itertools.permutations(range(4)):
            value = ndcg_at_k(np.array(perm), rel, k)
            assert value <= 1.0 + 1e-12
            gains = tuple(rel[list(perm)][:k])
            if gains == ideal_gain:
                assert value == pytest.approx(1.0)
            else:
                assert value < 1.0

    def test_relabeling_invariance(self):
        # metrics see only relevance along the ranking, not item identities
        rel = np.array([0, 1, 2])
        ranking = np.array([2, 0, 1])
        direct = ndcg_at_k(ranking, rel, 3)
        relabeled = ndcg_at_k(np.array([0, 1, 2]), rel[ranking], 3)
        assert direct == pytest.approx(relabeled, abs=1e-12)

    def test_numerator_monotone_under_fixed_ideal_cutoff(self):
        # with the ideal normalization held at a fixed cutoff, growing the
        # prediction cutoff can only add non-negative gain
        rng = np.random.default_rng(0)
        for _ in range(30):
            rel = rng.integers(0, 3, size=5)
            if not rel.any():
                continue
            perm = rng.permutation(5)
            norm = dcg(rel[ideal_ranking(rel)], 5)
            values = [dcg(rel[perm], k) / norm for k in range(1, 6)]
            assert np.all(np.diff(values) >= -1e-12)


class TestRecall:
    def test_all_relevant_in_topk(self):
        rel = np.array([1, 1, 0, 0])
        assert recall_at_k(np.array([0, 1, 2, 3]), rel, 2) == 1.0

    def test_partial(self):
        rel = np.array([1, 1, 1, 0])
        assert recall_at_k(np.array([0, 3, 1, 2]), rel, 2) == pytest.approx(1 / 3)

    def test_k_at_least_n_captures_everything(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            rel = rng.integers(0, 2, size=4)
            if not rel.any():
                continue
            perm = rng.permutation(4)
            assert recall_at_k(perm, rel, 4) == 1.0
            assert recall_at_k(perm, rel, 9) == 1.0

    def test_no_relevant_zero(self):
        assert recall_at_k(np.array([0, 1]), np.array([0, 0]), 1) == 0.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            rel = rng.integers(0, 2, size=5)
            perm = rng.permutation(5)
            values = [recall_at_k(perm, rel, k) for k in range(1, 6)]
            assert np.all(np.diff(values) >= 0.0)


class TestEvaluate:
    def test_means_match_per_example_values(self, tabular_instance):
        theta, _, examples = tabular_instance(0, n=6, n_examples=8, scale=1.0)
        result = evaluate_policy(theta, examples, ks=[1, 3])
        for k in (1, 3):
            assert result.ndcg[k] == pytest.approx(
                float(np.mean(result.per_example_ndcg[k])), abs=1e-12
            )
            assert 0.0 <= result.ndcg[k] <= 1.0
            assert 0.0 <= result.recall[k] <= 1.0

    def test_degenerate_examples_counted_and_zero(self):
        blank = make_example("b", [CandidateItem("b-1"), CandidateItem("b-2")], [0, 0])
        result = evaluate_rankings([np.array([0, 1])], [blank], ks=[1])
        assert result.degenerate == 1
        assert result.ndcg[1] == 0.0
        assert result.recall[1] == 0.0

    def test_ranking_is_stable_on_score_ties(self, tabular_instance):
        theta, _, examples = tabular_instance(0, n=4)
        theta.params = np.zeros_like(theta.params)
        from irpo.metrics import policy_ranking

        assert policy_ranking(theta, examples[0]).tolist() == [0, 1, 2, 3]
