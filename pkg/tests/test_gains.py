import numpy as np
import pytest

from irpo.data import CandidateItem, make_example
from irpo.gains import GAIN_KINDS, GainScheme, gain_weight, gain_weights


def example_with(relevance, pid="g"):
    cands = [CandidateItem(f"{pid}-c{j}") for j in range(len(relevance))]
    return make_example(pid, cands, relevance)


class TestSchemeValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown gain scheme"):
            GainScheme(kind="borda")

    def test_precision_needs_positive_k(self):
        with pytest.raises(ValueError, match="k >= 1"):
            GainScheme(kind="precision_at_k", k=0)

    def test_edcg_needs_positive_lam(self):
        with pytest.raises(ValueError, match="lam > 0"):
            GainScheme(kind="edcg", lam=0.0)

    def test_rank_out_of_range(self):
        ex = example_with([1, 0])
        with pytest.raises(ValueError, match="rank"):
            gain_weight(GainScheme(), ex, 3)


class TestSpotValues:
    # relevance sorted along tau: grades [1, ...] -> y at rank 1 is 1, etc.
    def test_exponential_gain_log2_discount(self):
        ex = example_with([1, 0, 2])  # along tau: 2, 1, 0
        assert gain_weight(GainScheme(), ex, 1) == pytest.approx(3.0)
        assert gain_weight(GainScheme(), ex, 2) == pytest.approx(1.0 / np.log2(3.0))
        assert gain_weight(GainScheme(), ex, 3) == 0.0

    def test_grade_two_at_rank_three(self):
        ex = example_with([2, 2, 2])
        assert gain_weight(GainScheme(), ex, 3) == pytest.approx(1.5)

    def test_zero_grade_weighs_zero_in_all_relevance_schemes(self):
        ex = example_with([0, 0])
        for kind in GAIN_KINDS:
            if kind == "abl_position_only":
                continue
            w = gain_weights(GainScheme(kind=kind), ex)
            assert np.all(w == 0.0)

    def test_map_normalizes_by_relevant_count(self):
        ex = example_with([1, 1, 0, 0])
        w = gain_weights(GainScheme(kind="map"), ex)
        assert w[0] == pytest.approx(0.5)
        assert w[1] == pytest.approx(0.5)
        assert w[2] == 0.0

    def test_edcg_unit_grade_rank_two(self):
        ex = example_with([1, 1, 0])
        assert gain_weight(GainScheme(kind="edcg", lam=0.5), ex, 2) == pytest.approx(
            0.36787944117144233
        )

    def test_position_only_uses_natural_log(self):
        ex = example_with([0, 0, 0])
        w = gain_weights(GainScheme(kind="abl_position_only"), ex)
        assert w[0] == pytest.approx(1.0 / np.log(2.0))
        assert w[1] == pytest.approx(1.0 / np.log(3.0))


class TestMrrVariants:
    def test_default_weighs_only_first_relevant_rank(self):
        ex = example_with([1, 1, 0])
        w = gain_weights(GainScheme(kind="mrr"), ex)
        assert w.tolist() == [1.0, 0.0, 0.0]

    def test_per_item_variant_weighs_every_relevant_rank(self):
        ex = example_with([1, 1, 0])
        w = gain_weights(GainScheme(kind="mrr", mrr_per_item=True), ex)
        assert w.tolist() == [1.0, 0.5, 0.0]

    def test_no_relevant_items_all_zero(self):
        ex = example_with([0, 0])
        assert gain_weights(GainScheme(kind="mrr"), ex).tolist() == [0.0, 0.0]


class TestProperties:
    def test_nonincreasing_on_relevance_sorted_tau(self):
        rng = np.random.default_rng(5)
        for kind in ("ndcg", "edcg", "abl_position_only", "abl_linear_discount"):
            for _ in range(20):
                rel = np.sort(rng.integers(0, 3, size=6))[::-1]
                w = gain_weights(GainScheme(kind=kind), example_with(rel))
                assert np.all(np.diff(w) <= 1e-12), (kind, rel, w)

    def test_doubling_grade_triples_gain_at_fixed_rank(self):
        one = example_with([1, 1, 1])
        two = example_with([2, 2, 2])
        w1 = gain_weights(GainScheme(), one)
        w2 = gain_weights(GainScheme(), two)
        assert np.allclose(w2, 3.0 * w1)

    def test_precision_cutoff_is_hard_zero(self):
        ex = example_with([1] * 6)
        w = gain_weights(GainScheme(kind="precision_at_k", k=3), ex)
        assert w.tolist() == [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]

    def test_map_degenerate_flagged_not_raised(self):
        ex = example_with([0, 0, 0])
        assert gain_weights(GainScheme(kind="map"), ex).tolist() == [0.0, 0.0, 0.0]

    def test_weights_finite_and_nonnegative(self):
        rng = np.random.default_rng(11)
        for kind in GAIN_KINDS:
            for _ in range(10):
                rel = rng.integers(0, 4, size=5)
                w = gain_weights(GainScheme(kind=kind), example_with(rel))
                assert np.all(np.isfinite(w)) and np.all(w >= 0.0)
