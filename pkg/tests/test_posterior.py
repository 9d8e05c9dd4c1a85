import numpy as np
import pytest

from tracegp.errors import DataError
from tracegp.model.kernels import KernelMatrix, identity_kernel, kernel_basis
from tracegp.model.meanfit import Hyperparams, SparseObservations, fit
from tracegp.model.posterior import (
    PosteriorGP, cholesky_with_jitter, factor_gp_map, posterior_covariance,
    posterior_mean_closed_form, sample_prior, trace_equivalent_objective, variational_trace_identity,
)


def _joint_conditioning(k_m, k_n, rows, cols, values, sigma2):
    """Dense Gaussian conditioning on the M·N joint, indexed m·N + n"""
    n_cols = k_n.shape[0]
    joint = np.kron(k_m, k_n)
    t = np.asarray(rows) * n_cols + np.asarray(cols)
    system = joint[np.ix_(t, t)] + sigma2 * np.eye(len(t))
    mean = joint[:, t] @ np.linalg.solve(system, values)
    cov = joint - joint[:, t] @ np.linalg.solve(system, joint[t, :])
    return mean.reshape(k_m.shape[0], n_cols), cov


class TestClosedFormMean:
    def test_single_observation_identity_kernels(self):
        phi = posterior_mean_closed_form(np.eye(2), np.eye(3), [0], [0], [1.0], 1.0)
        expected = np.zeros((2, 3))
        expected[0, 0] = 0.5
        np.testing.assert_allclose(phi, expected, atol=1e-15)

    def test_infinite_noise_limit(self, random_kernel, rng):
        k_m, k_n = random_kernel(4, rng), random_kernel(3, rng)
        phi = posterior_mean_closed_form(k_m, k_n, [0, 1, 3], [0, 2, 1], [1.0, -2.0, 3.0], 1e8)
        assert np.abs(phi).max() < 1e-6

    def test_duplicate_without_noise_rejected(self):
        with pytest.raises(DataError):
            posterior_mean_closed_form(np.eye(2), np.eye(2), [0, 0], [1, 1], [1.0, 1.0], 0.0)

    def test_matches_ridge_mean_fit(self, random_kernel, rng):
        k_m, k_n = random_kernel(6, rng), random_kernel(5, rng)
        rows, cols = np.divmod(np.arange(30), 5)
        values = rng.standard_normal(30)
        phi = posterior_mean_closed_form(k_m, k_n, rows, cols, values, 0.5)
        data = SparseObservations(6, 5, rows, cols, values)
        model, _ = fit(data, kernel_basis(k_m), kernel_basis(k_n),
                       Hyperparams(lam=0.5, alpha=0.0, tol=1e-11, max_iter=20000))
        np.testing.assert_allclose(model.dense_mean(), phi, atol=1e-6)


class TestConditioningOracle:
    def test_all_small_instances(self, random_kernel, rng):
        for n_rows in (3, 4, 5):
            for n_cols in (3, 4, 5):
                k_m, k_n = random_kernel(n_rows, rng), random_kernel(n_cols, rng)
                n_obs = int(rng.integers(1, 9))
                cells = rng.choice(n_rows * n_cols, size=n_obs, replace=False)
                rows, cols = np.divmod(cells, n_cols)
                values = rng.standard_normal(n_obs)
                mean, cov = _joint_conditioning(k_m.entries, k_n.entries, rows, cols, values, 0.5)

                phi = posterior_mean_closed_form(k_m, k_n, rows, cols, values, 0.5)
                np.testing.assert_allclose(phi, mean, atol=1e-10)

                gp = PosteriorGP(k_m, k_n, rows, cols, 0.5)
                q_rows, q_cols = np.divmod(np.arange(n_rows * n_cols), n_cols)
                np.testing.assert_allclose(posterior_covariance(gp, q_rows, q_cols), cov, atol=1e-10)


class TestPosteriorCovariance:
    def test_no_observations_gives_prior(self, random_kernel, rng):
        k_m, k_n = random_kernel(3, rng), random_kernel(2, rng)
        gp = PosteriorGP(k_m, k_n, [], [], 1.0)
        q_rows, q_cols = [0, 2, 1], [1, 0, 1]
        prior = k_m.entries[np.ix_(q_rows, q_rows)] * k_n.entries[np.ix_(q_cols, q_cols)]
        np.testing.assert_allclose(posterior_covariance(gp, q_rows, q_cols), prior)

    def test_noiseless_interpolation_limit(self, random_kernel, rng):
        gp = PosteriorGP(random_kernel(3, rng), random_kernel(3, rng), [1], [2], 1e-10)
        assert posterior_covariance(gp, [1], [2])[0, 0] < 1e-8

    def test_variance_never_exceeds_prior(self, random_kernel, rng):
        k_m, k_n = random_kernel(5, rng), random_kernel(4, rng)
        gp = PosteriorGP(k_m, k_n, [0, 1, 2, 4], [3, 0, 2, 1], 0.3)
        q_rows, q_cols = np.divmod(np.arange(20), 4)
        cov = posterior_covariance(gp, q_rows, q_cols)
        prior = np.diag(k_m.entries)[q_rows] * np.diag(k_n.entries)[q_cols]
        assert np.all(np.diag(cov) <= prior + 1e-10)
        assert np.linalg.eigvalsh(cov).min() >= -1e-8
        np.testing.assert_array_equal(cov, cov.T)

    def test_independent_of_mean_model(self, random_kernel, rng):
        k_m, k_n = random_kernel(4, rng), random_kernel(3, rng)
        rows, cols = [0, 1, 3], [2, 0, 1]
        data = SparseObservations(4, 3, rows, cols, [1.0, -1.0, 0.5])
        g_m, g_n = kernel_basis(k_m), kernel_basis(k_n)
        covs = []
        for lam, alpha in ((0.01, 1.0), (1.0, 0.0), (0.3, 0.6)):
            model, _ = fit(data, g_m, g_n, Hyperparams(lam=lam, alpha=alpha))
            gp = PosteriorGP(k_m, k_n, rows, cols, 0.7, mean_model=model)
            covs.append(posterior_covariance(gp, [0, 2, 3], [0, 1, 2]))
        np.testing.assert_array_equal(covs[0], covs[1])
        np.testing.assert_array_equal(covs[0], covs[2])


class TestJitter:
    def test_singular_system_factored_with_jitter(self):
        (factor, _), jitter = cholesky_with_jitter(np.ones((3, 3)))
        assert jitter > 0
        assert np.all(np.isfinite(factor))


class TestSamplePrior:
    def test_deterministic(self, random_kernel, rng):
        k_m, k_n = random_kernel(4, rng), random_kernel(5, rng)
        np.testing.assert_array_equal(sample_prior(k_m, k_n, 7), sample_prior(k_m, k_n, 7))

    def test_rank_one_rows_proportional(self, random_kernel, rng):
        v = rng.uniform(0.5, 1.5, size=4)
        z = sample_prior(KernelMatrix(np.outer(v, v)), random_kernel(6, rng), 3)
        s = np.linalg.svd(z, compute_uv=False)
        assert s[1] <= 1e-8 * s[0]

    def test_identity_kernels_unit_variance(self):
        k = identity_kernel(2)
        draws = np.array([sample_prior(k, k, seed)[0, 0] for seed in range(2000)])
        # sd of the sample variance is about sqrt(2 / n)
        assert abs(draws.var() - 1.0) < 4 * np.sqrt(2.0 / len(draws))


class TestFactorGP:
    def test_zero_data(self):
        data = SparseObservations.from_triples(3, 2, [(0, 0, 0.0), (1, 1, 0.0), (2, 0, 0.0)])
        model, value = factor_gp_map(data, identity_kernel(3), identity_kernel(2), rank=2, sigma2=1.0)
        assert value <= 1e-12
        assert np.abs(model.u @ model.v.T).max() <= 1e-6

    def test_planted_rank_one(self, rng):
        a, b = rng.standard_normal(4), rng.standard_normal(3)
        target = np.outer(a, b)
        rows, cols = np.divmod(np.arange(12), 3)
        data = SparseObservations(4, 3, rows, cols, target.reshape(-1))
        model, _ = factor_gp_map(data, identity_kernel(4), identity_kernel(3), rank=1, sigma2=1e-6)
        assert np.sum((model.u @ model.v.T - target) ** 2) <= 1e-6

    def test_matches_trace_norm_optimum(self, rng):
        u, _ = np.linalg.qr(rng.standard_normal((6, 2)))
        v, _ = np.linalg.qr(rng.standard_normal((5, 2)))
        target = u @ np.diag([3.0, 1.0]) @ v.T
        rows, cols = np.divmod(np.arange(30), 5)
        data = SparseObservations(6, 5, rows, cols, target.reshape(-1))
        sigma2 = 0.1

        # (1/σ²)‖R - B‖² + 2‖B‖_tr is minimized by soft-thresholding at σ²
        s = np.linalg.svd(target, compute_uv=False)
        oracle = np.sum(np.minimum(s, sigma2) ** 2) / sigma2 + 2.0 * np.sum(np.maximum(s - sigma2, 0.0))

        _, value = factor_gp_map(data, identity_kernel(6), identity_kernel(5), rank=3, sigma2=sigma2,
                                 max_iter=5000, tol=1e-14)
        assert value >= oracle - 1e-8
        assert value == pytest.approx(oracle, rel=1e-4)

        model, _ = fit(data, kernel_basis(identity_kernel(6)), kernel_basis(identity_kernel(5)),
                       Hyperparams(lam=sigma2, alpha=1.0, tol=1e-12, max_iter=20000))
        assert trace_equivalent_objective(model, data, sigma2) == pytest.approx(oracle, rel=1e-6)

    def test_restarts_keep_the_best_optimum(self, rng):
        values = rng.standard_normal((5, 4))
        rows, cols = np.divmod(np.arange(20), 4)
        data = SparseObservations(5, 4, rows, cols, values.reshape(-1))
        k_m, k_n = identity_kernel(5), identity_kernel(4)
        _, single = factor_gp_map(data, k_m, k_n, rank=2, sigma2=0.5, restarts=1, seed=3)
        model, best = factor_gp_map(data, k_m, k_n, rank=2, sigma2=0.5, restarts=5, seed=3)
        assert best <= single
        assert np.all(np.isfinite(model.u)) and np.all(np.isfinite(model.v))

    def test_invalid_rank(self):
        data = SparseObservations.from_triples(2, 2, [(0, 0, 1.0)])
        with pytest.raises(DataError):
            factor_gp_map(data, identity_kernel(2), identity_kernel(2), rank=0, sigma2=1.0)


class TestVariationalTraceIdentity:
    def test_examples(self):
        assert variational_trace_identity(np.zeros((1, 1)), np.zeros((1, 1))) == (0.0, 0.0)
        assert variational_trace_identity(np.array([[2.0]]), np.array([[2.0]])) == pytest.approx((4.0, 4.0))
        assert variational_trace_identity(np.array([[2.0]]), np.array([[1.0]])) == pytest.approx((2.5, 2.0))

    def test_upper_bound_on_random_pairs(self, rng):
        for _ in range(1000):
            m, n, f = rng.integers(1, 7, size=3)
            lhs, rhs = variational_trace_identity(rng.standard_normal((m, f)), rng.standard_normal((n, f)))
            assert lhs >= rhs - 1e-12

    def test_balanced_factorization_is_tight(self, rng):
        for _ in range(50):
            z = rng.standard_normal((6, 4))
            a, s, bt = np.linalg.svd(z, full_matrices=False)
            lhs, rhs = variational_trace_identity(a * np.sqrt(s), bt.T * np.sqrt(s))
            assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            variational_trace_identity(np.ones((2, 2)), np.ones((3, 1)))
