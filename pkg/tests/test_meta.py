"""Stage-2 pooling: REML, DerSimonian-Laird, t quantiles, prediction intervals."""

import math

import numpy as np
import pytest

from catemeta import (
    EstimationError,
    InsufficientStudiesError,
    MetaInput,
    StudyCateEstimate,
    dl_theta2,
    pool_cate,
    prediction_interval,
    reml_theta2,
    restricted_log_likelihood,
    t_quantile,
)
from catemeta.meta import reml_theta2_batch


def meta_input(tau, v, profile_id=0):
    return MetaInput(
        profile_id=profile_id,
        estimates=tuple(
            StudyCateEstimate(s + 1, profile_id, float(t), float(vi))
            for s, (t, vi) in enumerate(zip(tau, v))
        ),
    )


def grid_argmax(meta, upper, coarse=1e-3, fine=1e-6):
    """Brute-force grid maximizer of the restricted log likelihood.

    Coarse scan over [0, upper], then a dense scan at the fine step around
    the coarse winner; equivalent to a full fine grid when the coarse scan
    brackets the global maximum.
    """
    from catemeta.meta import _profile_log_likelihood

    tau, v = meta.tau, meta.v
    coarse_grid = np.arange(0.0, upper + coarse, coarse)
    vals = _profile_log_likelihood(coarse_grid, tau, v)
    center = coarse_grid[int(np.argmax(vals))]
    lo = max(center - 2 * coarse, 0.0)
    fine_grid = np.arange(lo, min(center + 2 * coarse, upper) + fine, fine)
    vals = _profile_log_likelihood(fine_grid, tau, v)
    return float(fine_grid[int(np.argmax(vals))])


class TestRestrictedLogLikelihood:
    def test_hand_value_two_equal_studies(self):
        mi = meta_input([1.0, 1.0], [1.0, 1.0])
        assert restricted_log_likelihood(0.0, mi) == pytest.approx(-0.5 * math.log(2.0), abs=1e-12)

    def test_decreases_as_theta2_grows_large(self):
        mi = meta_input([0.0, 1.0, 3.0], [0.5, 1.0, 2.0])
        values = [restricted_log_likelihood(t2, mi) for t2 in (10.0, 100.0, 1000.0, 10000.0)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_identical_estimates_maximized_at_zero(self):
        mi = meta_input([2.0, 2.0, 2.0], [0.3, 0.6, 0.9])
        at_zero = restricted_log_likelihood(0.0, mi)
        for t2 in (0.01, 0.1, 1.0):
            assert restricted_log_likelihood(t2, mi) < at_zero

    def test_negative_theta2_rejected(self):
        with pytest.raises(ValueError):
            restricted_log_likelihood(-0.1, meta_input([0.0, 1.0], [1.0, 1.0]))


class TestRemlTheta2:
    def test_identical_estimates_give_zero(self):
        assert reml_theta2(meta_input([3.0, 3.0, 3.0], [0.5, 1.0, 2.0])) == 0.0

    def test_matches_grid_oracle_on_stated_example(self):
        mi = meta_input([0.0, 1.0, 2.0], [0.5, 0.5, 0.5])
        oracle = grid_argmax(mi, upper=20.0)
        assert reml_theta2(mi) == pytest.approx(oracle, abs=1e-4)

    def test_matches_grid_oracle_on_random_instances(self):
        rng = np.random.default_rng(42)
        for trial in range(25):
            k = int(rng.integers(3, 13))
            tau = rng.normal(0.0, rng.uniform(0.2, 2.0), size=k)
            v = rng.uniform(0.05, 1.5, size=k)
            mi = meta_input(tau, v)
            upper = 10.0 * float(np.var(tau, ddof=1)) + float(v.max())
            assert reml_theta2(mi) == pytest.approx(
                grid_argmax(mi, upper=upper), abs=1e-4
            ), f"instance {trial}"

    def test_nonnegative_always(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            k = int(rng.integers(2, 8))
            mi = meta_input(rng.normal(size=k), rng.uniform(0.1, 2.0, size=k))
            assert reml_theta2(mi) >= 0.0

    def test_batch_agrees_with_scalar(self):
        rng = np.random.default_rng(3)
        k, n_prof = 6, 40
        tau = rng.normal(0.0, 1.0, size=(k, n_prof))
        v = rng.uniform(0.05, 1.0, size=(k, n_prof))
        batch = reml_theta2_batch(tau, v)
        for j in range(n_prof):
            scalar = reml_theta2(meta_input(tau[:, j], v[:, j]))
            assert batch[j] == pytest.approx(scalar, abs=1e-6)

    def test_batch_shape_validation(self):
        with pytest.raises(ValueError):
            reml_theta2_batch(np.zeros((1, 4)), np.ones((1, 4)))


class TestDlTheta2:
    def test_two_study_hand_example(self):
        assert dl_theta2(meta_input([0.0, 2.0], [1.0, 1.0])) == pytest.approx(1.0, abs=1e-15)

    def test_three_study_hand_example(self):
        assert dl_theta2(meta_input([0.0, 1.0, 2.0], [0.5, 0.5, 0.5])) == pytest.approx(0.5, abs=1e-15)

    def test_identical_estimates_clamp_to_zero(self):
        assert dl_theta2(meta_input([1.3, 1.3, 1.3], [0.4, 0.8, 1.2])) == 0.0

    def test_zero_variance_is_error(self):
        with pytest.raises(EstimationError):
            dl_theta2(meta_input([0.0, 1.0], [0.0, 1.0]))


class TestPoolCate:
    def test_hand_example(self):
        pooled = pool_cate(meta_input([0.0, 2.0], [1.0, 1.0]), theta2=1.0)
        assert pooled.tau_pooled == pytest.approx(1.0)
        assert pooled.var_pooled == pytest.approx(1.0)
        assert pooled.weights == (0.5, 0.5)

    def test_dominant_study_takes_over(self):
        pooled = pool_cate(meta_input([5.0, 0.0, 0.0], [1e-8, 1.0, 1.0]), theta2=0.0)
        assert pooled.tau_pooled == pytest.approx(5.0, abs=1e-4)

    def test_huge_theta2_approaches_unweighted_mean(self):
        tau = [0.0, 1.0, 5.0]
        pooled = pool_cate(meta_input(tau, [0.1, 1.0, 3.0]), theta2=1e12)
        assert pooled.tau_pooled == pytest.approx(np.mean(tau), abs=1e-6)

    def test_degenerate_all_zero_variance_equal_estimates(self):
        pooled = pool_cate(meta_input([2.0, 2.0], [0.0, 0.0]), theta2=0.0)
        assert pooled.tau_pooled == 2.0
        assert pooled.var_pooled == 0.0

    def test_degenerate_all_zero_variance_unequal_estimates_is_error(self):
        with pytest.raises(EstimationError):
            pool_cate(meta_input([1.0, 2.0], [0.0, 0.0]), theta2=0.0)

    def test_pooled_estimate_is_convex_combination(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            k = int(rng.integers(2, 9))
            tau = rng.normal(size=k)
            mi = meta_input(tau, rng.uniform(0.1, 2.0, size=k))
            pooled = pool_cate(mi, float(rng.uniform(0.0, 2.0)))
            assert tau.min() - 1e-12 <= pooled.tau_pooled <= tau.max() + 1e-12
            w = np.array(pooled.weights)
            assert (w / w.sum()).sum() == pytest.approx(1.0, abs=1e-12)
            assert pooled.var_pooled == pytest.approx(1.0 / w.sum(), abs=1e-12)


class TestTQuantile:
    def test_cauchy_quartile(self):
        assert t_quantile(1, 0.75) == pytest.approx(1.0, abs=1e-12)

    def test_cauchy_general_closed_form(self):
        for p in (0.6, 0.9, 0.99):
            assert t_quantile(1, p) == pytest.approx(math.tan(math.pi * (p - 0.5)), rel=1e-12)

    def test_known_df2_value(self):
        assert t_quantile(2, 0.975) == pytest.approx(4.3026527, abs=1e-5)

    def test_median_is_zero(self):
        for df in (1, 2, 7, 100):
            assert t_quantile(df, 0.5) == 0.0

    def test_symmetry(self):
        for df in (1, 3, 9):
            for p in (0.6, 0.9, 0.999):
                assert t_quantile(df, 1.0 - p) == pytest.approx(-t_quantile(df, p), rel=1e-12)

    def test_monotone_in_p_and_decreasing_in_df(self):
        assert t_quantile(5, 0.9) < t_quantile(5, 0.95) < t_quantile(5, 0.99)
        assert t_quantile(1, 0.975) > t_quantile(10, 0.975) > t_quantile(200, 0.975)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            t_quantile(0, 0.9)
        with pytest.raises(ValueError):
            t_quantile(3, 0.0)
        with pytest.raises(ValueError):
            t_quantile(3, 1.0)


class TestPredictionInterval:
    def test_hand_example_k4(self):
        mi = meta_input([1.0, 1.0, 1.0, 1.0], [2.0, 2.0, 2.0, 2.0])
        pooled = pool_cate(mi, theta2=0.0)  # var_pooled = 0.5
        pi = prediction_interval(pooled, alpha=0.05, k_studies=4)
        half = t_quantile(2, 0.975) * math.sqrt(0.5)
        assert pi.center == 1.0
        assert pi.lower == pytest.approx(1.0 - half, abs=1e-10)
        assert pi.upper == pytest.approx(1.0 + half, abs=1e-10)
        assert pi.df == 2 and pi.level == 0.95

    def test_stated_numeric_example(self):
        # center 1, var_pooled 1, theta2 1, K = 4
        half = t_quantile(2, 0.975) * math.sqrt(2.0)
        assert 1.0 - half == pytest.approx(-5.0853, abs=1e-3)
        assert 1.0 + half == pytest.approx(7.0853, abs=1e-3)

    def test_degenerate_interval_is_a_point(self):
        pooled = pool_cate(meta_input([2.0, 2.0, 2.0], [0.0, 0.0, 0.0]), theta2=0.0)
        pi = prediction_interval(pooled, alpha=0.05, k_studies=3)
        assert pi.lower == pi.center == pi.upper == 2.0

    def test_more_studies_narrower_interval(self):
        # t_1 > t_28 and var_pooled shrinks with K at matched per-study variances
        mi3 = meta_input([0.0, 0.5, 1.0], [1.0, 1.0, 1.0])
        mi30 = meta_input([0.0, 0.5, 1.0] * 10, [1.0] * 30)
        w3 = prediction_interval(pool_cate(mi3, 1.0), 0.05, 3).width
        w30 = prediction_interval(pool_cate(mi30, 1.0), 0.05, 30).width
        assert w3 > w30

    def test_halfwidth_monotone_in_theta2(self):
        mi = meta_input([0.0, 1.0, 2.0, 3.0], [0.5] * 4)
        widths = [
            prediction_interval(pool_cate(mi, t2), 0.05, 4).width for t2 in (0.0, 0.5, 2.0)
        ]
        assert widths[0] < widths[1] < widths[2]

    def test_too_few_studies_is_error(self):
        pooled = pool_cate(meta_input([0.0, 1.0], [1.0, 1.0]), theta2=0.5)
        with pytest.raises(InsufficientStudiesError):
            prediction_interval(pooled, 0.05, 2)

    def test_k_must_match_pooled(self):
        pooled = pool_cate(meta_input([0.0, 1.0, 2.0], [1.0] * 3), theta2=0.5)
        with pytest.raises(ValueError):
            prediction_interval(pooled, 0.05, 4)


class TestMetaInput:
    def test_requires_two_studies(self):
        with pytest.raises(InsufficientStudiesError):
            MetaInput(0, (StudyCateEstimate(1, 0, 1.0, 1.0),))

    def test_rejects_mixed_profiles(self):
        with pytest.raises(ValueError):
            MetaInput(0, (StudyCateEstimate(1, 0, 1.0, 1.0),
                          StudyCateEstimate(2, 9, 1.0, 1.0)))
