import numpy as np
import pytest

from irpo.data import CandidateItem, Policy, make_example, tabular_policy
from irpo.gains import GainScheme
from irpo.gradient import (
    EstimatorReport,
    GradientVector,
    fd_gradient,
    grad_diff_vectors,
    gradient_check,
    importance_weights,
    irpo_grad,
    irpo_value_and_grad,
    max_grad_diff_norm,
    rank_term_grad,
    sampled_grad,
)
from irpo.objective import DivergenceError
from tests.conftest import build_linear_instance, build_tabular_instance


class TestAnalyticGradient:
    def test_matches_finite_differences_tabular(self):
        for seed in range(3):
            theta, ref, examples = build_tabular_instance(seed, n=6, n_examples=3, scale=1.0)
            report = gradient_check(theta, ref, examples, GainScheme(), beta=1.0)
            assert report.passed, f"max rel err {report.max_rel_err}"

    def test_matches_finite_differences_linear(self):
        theta, ref, examples = build_linear_instance(5, n=5, d=4, n_examples=3)
        report = gradient_check(theta, ref, examples, GainScheme(), beta=1.0)
        assert report.passed, f"max rel err {report.max_rel_err}"

    def test_matches_finite_differences_other_betas_and_gains(self):
        theta, ref, examples = build_tabular_instance(8, n=5, n_examples=2)
        for beta, kind in [(0.5, "edcg"), (2.0, "map"), (1.0, "precision_at_k")]:
            report = gradient_check(theta, ref, examples, GainScheme(kind=kind), beta=beta)
            assert report.passed, (beta, kind, report.max_rel_err)

    def test_zero_weights_zero_gradient(self):
        ex = make_example("z", [CandidateItem(f"z-c{j}") for j in range(4)], [0, 0, 0, 0])
        theta = tabular_policy([ex])
        theta.params = np.array([0.4, -0.2, 0.9, 0.0])
        grad = irpo_grad(theta, theta.copy(), [ex], GainScheme(), beta=1.0)
        assert np.all(grad.values == 0.0)

    def test_gradient_vector_rejects_non_finite(self):
        with pytest.raises(DivergenceError, match="parameter index 1"):
            GradientVector(np.array([0.0, np.nan]))

    def test_reference_enters_through_log_probs_only(self):
        theta, ref, examples = build_tabular_instance(2, n=4)

        class LogProbsOnly:
            # no params attribute at all: nothing to differentiate
            def __init__(self, inner):
                self._inner = inner

            def log_probs(self, example):
                return self._inner.log_probs(example)

        full = irpo_grad(theta, ref, examples, GainScheme(), beta=1.0)
        stubbed = irpo_grad(theta, LogProbsOnly(ref), examples, GainScheme(), beta=1.0)
        assert np.array_equal(full.values, stubbed.values)

    def test_gradient_check_flags_wrong_gradient(self):
        theta, ref, examples = build_tabular_instance(0, n=4)

        def wrong_loss(p):
            probe = Policy(theta.kind, p, theta.index)
            value, _, _ = irpo_value_and_grad(probe, ref, examples, GainScheme(), 1.0)
            return value

        analytic = -irpo_grad(theta, ref, examples, GainScheme(), 1.0).values
        numeric = fd_gradient(wrong_loss, theta.params)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.abs(analytic - numeric)[scale > 1e-8] / scale[scale > 1e-8]
        assert rel.max() > 1e-2  # a flipped sign is far outside tolerance


class TestImportanceWeights:
    def test_uniform_when_policies_match(self, tabular_instance):
        theta, _, examples = tabular_instance(0, n=5)
        rho = importance_weights(theta, theta.copy(), examples[0], 1, beta=1.0)
        assert np.allclose(rho, 0.2, atol=1e-12)

    def test_beta_to_zero_flattens(self, tabular_instance):
        theta, ref, examples = tabular_instance(1, n=4, scale=2.0)
        rho = importance_weights(theta, ref, examples[0], 2, beta=1e-9)
        assert np.allclose(rho, 0.25, atol=1e-6)

    def test_two_way_value(self):
        # deltas (0, 1), beta 1: softmax gives (1/(1+e), e/(1+e))
        ex = make_example("w", [CandidateItem("w-a"), CandidateItem("w-b")], [1, 0])
        theta = tabular_policy([ex])
        theta.params = np.array([0.0, 1.0])
        rho = importance_weights(theta, tabular_policy([ex]), ex, 1, beta=1.0)
        assert rho[0] == pytest.approx(0.2689414213699951, abs=1e-12)
        assert rho[1] == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_rows_sum_to_one_and_match_across_ranks(self):
        for seed in range(20):
            theta, ref, examples = build_tabular_instance(seed, n=6, scale=3.0)
            rows = [
                importance_weights(theta, ref, examples[0], rank, beta=1.3)
                for rank in range(1, 7)
            ]
            for row in rows:
                assert row.sum() == pytest.approx(1.0, abs=1e-12)
                assert np.allclose(row, rows[0], atol=1e-12)


class TestSampledEstimator:
    def test_degenerate_weights_recover_exact_term(self):
        # one dominant delta: the single draw is deterministic
        ex = make_example("d", [CandidateItem(f"d-c{j}") for j in range(3)], [1, 0, 0])
        theta = tabular_policy([ex])
        theta.params = np.array([0.0, 30.0, 0.0])
        ref = tabular_policy([ex])
        report = sampled_grad(theta, ref, ex, 1, beta=1.0, m=1, seed=0, clip_L=100.0)
        expected = grad_diff_vectors(theta, ex, 1)[1]
        assert np.allclose(report.g_sampled_mean.values, expected, atol=1e-12)

    def test_deterministic_given_seed(self, tabular_instance):
        theta, ref, examples = tabular_instance(3, n=5)
        a = sampled_grad(theta, ref, examples[0], 2, 1.0, m=500, seed=11)
        b = sampled_grad(theta, ref, examples[0], 2, 1.0, m=500, seed=11)
        assert np.array_equal(a.g_sampled_mean.values, b.g_sampled_mean.values)

    def test_mean_converges_to_exact(self):
        theta, ref, examples = build_tabular_instance(5, n=6, scale=0.3, ref_scale=0.0)
        ex = examples[0]
        g = rank_term_grad(theta, ref, ex, 1, beta=1.0)
        report = sampled_grad(theta, ref, ex, 1, 1.0, m=100_000, seed=4, clip_L=100.0)
        rel = np.abs(report.g_sampled_mean.values - g) / np.abs(g)
        assert rel.max() < 0.01

    def test_clipping_caps_sample_norms(self):
        theta, ref, examples = build_tabular_instance(6, n=4)
        ex = examples[0]
        tiny = 0.05
        report = sampled_grad(theta, ref, ex, 1, 1.0, m=50, seed=3, clip_L=tiny)
        assert np.linalg.norm(report.g_sampled_mean.values) <= tiny + 1e-12

    def test_deviation_bound_holds_over_repetitions(self):
        theta, ref, examples = build_tabular_instance(7, n=6, scale=0.5, ref_scale=0.0)
        ex = examples[0]
        rank = 1
        rho = importance_weights(theta, ref, ex, rank, 1.0)
        clip = max_grad_diff_norm(theta, ex, rank)  # no clipping actually binds
        m = int(np.ceil(ex.n / rho.max()))  # sample count the averaged bound assumes
        g = rank_term_grad(theta, ref, ex, rank, 1.0)
        seeds = np.random.SeedSequence(2718).spawn(200)
        devs = [
            np.linalg.norm(
                sampled_grad(
                    theta, ref, ex, rank, 1.0, m, int(s.generate_state(1)[0]), clip
                ).g_sampled_mean.values
                - g
            )
            for s in seeds
        ]
        bound = clip * np.sqrt(rho.max() / ex.n)
        assert np.mean(devs) <= bound * 1.1

    def test_report_bound_formula(self, tabular_instance):
        theta, ref, examples = tabular_instance(9, n=5)
        report = sampled_grad(theta, ref, examples[0], 1, 1.0, m=10, seed=0, clip_L=2.5)
        assert report.bound == pytest.approx(2.5 * np.sqrt(report.rho_max / 5))
        assert isinstance(report, EstimatorReport)

    def test_sample_count_validated(self, tabular_instance):
        theta, ref, examples = tabular_instance(0, n=3)
        with pytest.raises(ValueError):
            sampled_grad(theta, ref, examples[0], 1, 1.0, m=0, seed=0)
