import numpy as np
import pytest

from tracegp.errors import DataError
from tracegp.model.kernels import KernelBasis
from tracegp.model.meanfit import (
    Hyperparams, MeanModel, SparseObservations, default_s_grid, fit, fit_path, fit_row_bias,
    hilbert_norm_sq, lambda_max, objective, predict, ridge_solve, spectral_elastic_net, trace_norm,
)
from tracegp.model.posterior import posterior_mean_closed_form


def _full(matrix):
    n_rows, n_cols = matrix.shape
    rows, cols = np.divmod(np.arange(n_rows * n_cols), n_cols)
    return SparseObservations(n_rows, n_cols, rows, cols, matrix.reshape(-1))


def _partial(n_rows, n_cols, rng, fraction=0.5):
    mask = rng.random((n_rows, n_cols)) < fraction
    mask[0, 0] = True
    rows, cols = np.nonzero(mask)
    return SparseObservations(n_rows, n_cols, rows, cols, rng.standard_normal(len(rows)))


class TestObservations:
    def test_duplicates_rejected(self):
        with pytest.raises(DataError):
            SparseObservations.from_triples(2, 2, [(0, 0, 1.0), (0, 0, 2.0)])

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            SparseObservations.from_triples(2, 2, [(2, 0, 1.0)])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            SparseObservations(2, 2, [], [], [])


class TestHyperparams:
    @pytest.mark.parametrize("kwargs", [{'lam': -1.0}, {'lam': 1.0, 'alpha': 1.5}, {'lam': 1.0, 'sigma2': 0.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(DataError):
            Hyperparams(**kwargs)

    def test_dict_round_trip(self):
        h = Hyperparams(lam=0.3, alpha=0.4, trace_bound=2.0, use_row_bias=True)
        assert Hyperparams.from_dict(h.to_dict()) == h


class TestNorms:
    def test_zero(self):
        b = np.zeros((3, 2))
        assert trace_norm(b) == 0.0
        assert spectral_elastic_net(b, 1.0, 1.0) == 0.0
        model = MeanModel(b, KernelBasis(np.eye(3)), KernelBasis(np.eye(2)), np.zeros(3))
        assert hilbert_norm_sq(model) == 0.0

    def test_orthonormal(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        model = MeanModel(q, KernelBasis(np.eye(4)), KernelBasis(np.eye(4)), np.zeros(4))
        assert trace_norm(q) == pytest.approx(4.0)
        assert hilbert_norm_sq(model) == pytest.approx(4.0)

    def test_against_svd(self, rng):
        b = rng.standard_normal((5, 4))
        s = np.linalg.svd(b, compute_uv=False)
        assert trace_norm(b) == pytest.approx(s.sum(), abs=1e-10)
        assert spectral_elastic_net(b, 0.3, 0.7) == pytest.approx(0.3 * np.sum(s ** 2) + 0.7 * s.sum())


class TestObjective:
    def test_zero_prediction(self, identity_bases):
        g_m, g_n = identity_bases(2, 2)
        data = SparseObservations.from_triples(2, 2, [(0, 0, 1.0), (1, 0, 3.0)])
        assert objective(MeanModel.zeros(g_m, g_n), data, Hyperparams(lam=5.0)) == pytest.approx(5.0)

    def test_frobenius_penalty(self, identity_bases):
        g_m, g_n = identity_bases(2, 2)
        data = SparseObservations.from_triples(2, 2, [(0, 0, 1.0), (1, 1, 1.0), (0, 1, 0.0), (1, 0, 0.0)])
        model = MeanModel(np.eye(2), g_m, g_n, np.zeros(2))
        assert objective(model, data, Hyperparams(lam=2.0, alpha=0.0)) == pytest.approx(2.0)

    def test_trace_penalty(self, identity_bases):
        g_m, g_n = identity_bases(2, 2)
        data = SparseObservations.from_triples(2, 2, [(0, 0, 3.0), (1, 1, 4.0)])
        model = MeanModel(np.diag([3.0, 4.0]), g_m, g_n, np.zeros(2))
        assert objective(model, data, Hyperparams(lam=1.0, alpha=1.0)) == pytest.approx(7.0)


class TestLambdaMax:
    def test_zero_residuals(self, identity_bases):
        g_m, g_n = identity_bases(2, 3)
        data = SparseObservations.from_triples(2, 3, [(0, 0, 0.0), (1, 2, 0.0)])
        assert lambda_max(data, g_m, g_n) == 0.0

    def test_single_entry(self, identity_bases):
        g_m, g_n = identity_bases(3, 3)
        data = SparseObservations.from_triples(3, 3, [(0, 0, 5.0)])
        assert lambda_max(data, g_m, g_n) == pytest.approx(5.0)

    def test_row_bias_absorbs_constant_rows(self, identity_bases):
        g_m, g_n = identity_bases(2, 3)
        data = SparseObservations.from_triples(2, 3, [(0, 0, 2.0), (0, 1, 2.0), (1, 2, -1.0)])
        assert lambda_max(data, g_m, g_n, use_row_bias=True) == 0.0


class TestZeroRule:
    def test_trace_model_returns_zero_above_lambda_max(self, kernel_bases, rng):
        for _ in range(50):
            _, _, g_m, g_n = kernel_bases(6, 5, rng)
            data = _partial(6, 5, rng)
            lam = 1.01 * lambda_max(data, g_m, g_n)
            model, report = fit(data, g_m, g_n, Hyperparams(lam=lam, alpha=1.0))
            assert not model.b_matrix.any()
            assert report.converged

    def test_elastic_net_zero_rule_uses_alpha(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(6, 5, rng)
        data = _partial(6, 5, rng)
        lam_max = lambda_max(data, g_m, g_n)
        at_rule, _ = fit(data, g_m, g_n, Hyperparams(lam=lam_max / 0.5, alpha=0.5))
        below, _ = fit(data, g_m, g_n, Hyperparams(lam=0.9 * lam_max / 0.5, alpha=0.5))
        assert not at_rule.b_matrix.any()
        assert below.b_matrix.any()

    def test_path_top_is_zero(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(6, 5, rng)
        (point,) = fit_path(_partial(6, 5, rng), g_m, g_n, alphas=[1.0], s_grid=[1.0])
        assert not point.model.b_matrix.any()


class TestFit:
    def test_ridge_matches_closed_form_posterior_mean(self, kernel_bases, rng):
        sigma2 = 1.0
        for _ in range(20):
            k_m, k_n, g_m, g_n = kernel_bases(20, 15, rng)
            data = _full(rng.standard_normal((20, 15)))
            model, report = fit(data, g_m, g_n, Hyperparams(lam=sigma2, alpha=0.0))
            oracle = posterior_mean_closed_form(k_m, k_n, data.rows, data.cols, data.values, sigma2)
            err = np.linalg.norm(model.dense_mean() - oracle) / np.linalg.norm(oracle)
            assert report.converged
            assert err <= 1e-6

    def test_unregularized_interpolates(self, identity_bases, rng):
        g_m, g_n = identity_bases(4, 3)
        target = rng.standard_normal((4, 3))
        model, _ = fit(_full(target), g_m, g_n, Hyperparams(lam=0.0, alpha=0.0, tol=1e-12))
        np.testing.assert_allclose(model.dense_mean(), target, atol=1e-8)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_objective_trace_non_increasing(self, kernel_bases, rng, alpha):
        _, _, g_m, g_n = kernel_bases(10, 8, rng)
        data = _partial(10, 8, rng)
        lam = 0.1 * lambda_max(data, g_m, g_n)
        _, report = fit(data, g_m, g_n, Hyperparams(lam=lam, alpha=alpha, use_row_bias=True))
        trace = np.asarray(report.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12 * max(1.0, trace[0]))

    def test_two_initializations_agree(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(10, 8, rng)
        data = _partial(10, 8, rng)
        h = Hyperparams(lam=0.2 * lambda_max(data, g_m, g_n), alpha=1.0, tol=1e-10, max_iter=20000)
        cold, _ = fit(data, g_m, g_n, h)
        init = MeanModel(rng.standard_normal((g_m.dim, g_n.dim)), g_m, g_n, np.zeros(10))
        warm, _ = fit(data, g_m, g_n, h, init=init)
        assert objective(warm, data, h) == pytest.approx(objective(cold, data, h), rel=1e-6)

    def test_non_convergence_is_reported(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(10, 8, rng)
        data = _partial(10, 8, rng)
        h = Hyperparams(lam=0.01 * lambda_max(data, g_m, g_n), alpha=1.0, tol=1e-14, max_iter=2)
        _, report = fit(data, g_m, g_n, h)
        assert not report.converged
        assert report.iterations == 2

    def test_basis_mismatch_rejected(self, identity_bases):
        g_m, g_n = identity_bases(3, 3)
        with pytest.raises(DataError):
            fit(_full(np.ones((2, 3))), g_m, g_n, Hyperparams(lam=1.0))


class TestRidgeSolve:
    @staticmethod
    def _gradient(data, g_m, g_n, b, ridge):
        res = data.values - predict(MeanModel(b, g_m, g_n, np.zeros(g_m.rows)), data.rows, data.cols)
        return ridge * b - g_m.entries.T @ data.as_sparse(res).toarray() @ g_n.entries

    def test_dual_system_is_stationary(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(6, 5, rng)
        data = _partial(6, 5, rng)
        assert len(data) < g_m.dim * g_n.dim
        b = ridge_solve(data, g_m, g_n, 0.3)
        assert np.abs(self._gradient(data, g_m, g_n, b, 0.3)).max() <= 1e-10

    def test_primal_system_is_stationary(self, rng):
        g_m, g_n = KernelBasis(rng.standard_normal((6, 2))), KernelBasis(rng.standard_normal((5, 2)))
        data = _full(rng.standard_normal((6, 5)))
        assert len(data) > g_m.dim * g_n.dim
        b = ridge_solve(data, g_m, g_n, 0.3)
        assert np.abs(self._gradient(data, g_m, g_n, b, 0.3)).max() <= 1e-10

    def test_fit_reports_exact_solution(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(8, 6, rng)
        data = _partial(8, 6, rng)
        model, report = fit(data, g_m, g_n, Hyperparams(lam=0.5, alpha=0.0))
        assert report.converged
        assert report.objective_trace[-1] <= report.objective_trace[0]
        np.testing.assert_allclose(model.b_matrix, ridge_solve(data, g_m, g_n, 0.5))


class TestFitPath:
    def test_rank_grows_as_lambda_shrinks(self, kernel_bases, rng):
        for _ in range(3):
            _, _, g_m, g_n = kernel_bases(25, 20, rng)
            low_rank = rng.standard_normal((25, 3)) @ rng.standard_normal((3, 20))
            data = _full(low_rank + 0.01 * rng.standard_normal((25, 20)))
            points = fit_path(data, g_m, g_n, alphas=[1.0], s_grid=default_s_grid(10, 1e-3))
            ranks = [point.report.rank_of_b for point in points]
            assert ranks[0] == 0
            assert ranks[-1] >= 3
            # λ decreases along the path; one unit of slack per step
            assert all(later >= earlier - 1 for earlier, later in zip(ranks, ranks[1:]))

    def test_default_grid(self):
        grid = default_s_grid()
        assert len(grid) == 30
        assert grid[0] == pytest.approx(1.0)
        assert grid[-1] == pytest.approx(1e-3)

    def test_ascending_grid_rejected(self, identity_bases, rng):
        g_m, g_n = identity_bases(3, 3)
        with pytest.raises(DataError):
            fit_path(_full(rng.standard_normal((3, 3))), g_m, g_n, [1.0], s_grid=[0.1, 1.0])

    def test_warm_start_no_worse_than_cold(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(8, 6, rng)
        data = _partial(8, 6, rng)
        base = Hyperparams(lam=0.0, tol=1e-9, max_iter=20000)
        points = fit_path(data, g_m, g_n, alphas=[1.0, 0.5], s_grid=[1.0, 0.3, 0.1, 0.03], base=base)
        assert len(points) == 8
        for point in points:
            h = Hyperparams(lam=point.lam, alpha=point.alpha, tol=1e-9, max_iter=20000)
            cold, _ = fit(data, g_m, g_n, h)
            assert objective(point.model, data, h) <= objective(cold, data, h) * (1 + 1e-6) + 1e-9


class TestRowBias:
    def test_mean_residual(self):
        data = SparseObservations.from_triples(3, 2, [(0, 0, 2.0), (0, 1, 4.0), (1, 0, 1.0)])
        bias = fit_row_bias(data, np.zeros(3))
        np.testing.assert_allclose(bias, [3.0, 1.0, 0.0])

    def test_exact_predictions(self):
        data = SparseObservations.from_triples(2, 2, [(0, 0, 2.0), (1, 1, -1.0)])
        np.testing.assert_array_equal(fit_row_bias(data, data.values), np.zeros(2))


class TestPredict:
    def test_zero_model(self, identity_bases):
        g_m, g_n = identity_bases(3, 4)
        assert not predict(MeanModel.zeros(g_m, g_n), [0, 2], [1, 3]).any()

    def test_identity_bases_read_b(self, identity_bases, rng):
        g_m, g_n = identity_bases(3, 4)
        b = rng.standard_normal((3, 4))
        model = MeanModel(b, g_m, g_n, np.zeros(3))
        np.testing.assert_array_equal(predict(model, [0, 2, 1], [3, 0, 1]), [b[0, 3], b[2, 0], b[1, 1]])

    def test_matches_dense_mean(self, kernel_bases, rng):
        _, _, g_m, g_n = kernel_bases(5, 4, rng)
        model = MeanModel(rng.standard_normal((g_m.dim, g_n.dim)), g_m, g_n, rng.standard_normal(5))
        rows, cols = np.divmod(np.arange(20), 4)
        np.testing.assert_allclose(predict(model, rows, cols), model.dense_mean().reshape(-1), atol=1e-12)
        np.testing.assert_allclose(predict(model, rows, cols, include_bias=True),
                                   model.dense_mean(include_bias=True).reshape(-1), atol=1e-12)

    def test_out_of_range(self, identity_bases):
        g_m, g_n = identity_bases(2, 2)
        with pytest.raises(DataError):
            predict(MeanModel.zeros(g_m, g_n), [2], [0])
