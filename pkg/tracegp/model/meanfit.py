"""
Posterior mean estimation in basis coordinates.

The mean is ψ(m, n) = G_M(m) B G_N(n)ᵀ (+ b_m when row biases are learned),
and B minimizes the spectral elastic net objective

    ½ Σ_T (r - ψ)² + λ(1-α)/2 ‖B‖_F² + λα ‖B‖_tr

with an accelerated proximal gradient method: the smooth part is the squared
loss plus the Frobenius term, the proximal step is singular value
soft-thresholding. The monotone variant keeps the objective non-increasing.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse

from ..config.settings import (
    FIT_MAX_ITER, FIT_TOL, RANK_TOLERANCE, RIDGE_EXACT_MAX, S_GRID_COUNT, S_GRID_HIGH, S_GRID_LOW,
)
from ..errors import DataError, TraceGPError
from .kernels import KernelBasis

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SparseObservations:
    """Observed entries (rows[i], cols[i]) -> values[i] of an n_rows x n_cols matrix"""
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if not (len(rows) == len(cols) == len(values)):
            raise DataError("Observation arrays must have equal lengths")
        if len(rows) == 0:
            raise DataError("Observations must be nonempty")
        if self.n_rows < 1 or self.n_cols < 1:
            raise DataError(f"Invalid dimensions {self.n_rows}x{self.n_cols}")
        _check_indices(rows, cols, self.n_rows, self.n_cols)
        if not np.all(np.isfinite(values)):
            raise DataError("Observed values must be finite")
        object.__setattr__(self, 'rows', rows)
        object.__setattr__(self, 'cols', cols)
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_triples(cls, n_rows: int, n_cols: int,
                     triples: Sequence[Tuple[int, int, float]]) -> 'SparseObservations':
        arr = np.asarray(list(triples), dtype=float).reshape(-1, 3)
        return cls(n_rows, n_cols, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2])

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values: np.ndarray) -> 'SparseObservations':
        return SparseObservations(self.n_rows, self.n_cols, self.rows, self.cols, values)

    def subset(self, index: np.ndarray) -> 'SparseObservations':
        return SparseObservations(self.n_rows, self.n_cols, self.rows[index], self.cols[index],
                                  self.values[index])

    def as_sparse(self, values: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        data = self.values if values is None else values
        return sparse.csr_matrix((data, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols))


def _check_indices(rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int,
                   allow_duplicates: bool = False) -> None:
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
        raise DataError(f"Row index out of range [0, {n_rows})")
    if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
        raise DataError(f"Column index out of range [0, {n_cols})")
    if not allow_duplicates:
        flat = rows * n_cols + cols
        if len(np.unique(flat)) != len(flat):
            raise DataError("Duplicate (row, column) observations")


@dataclass(frozen=True)
class Hyperparams:
    lam: float
    alpha: float = 1.0
    sigma2: float = 1.0
    max_iter: int = FIT_MAX_ITER
    tol: float = FIT_TOL
    factor_rank: int = 1
    trace_bound: Optional[float] = None
    use_row_bias: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise DataError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.sigma2 > 0:
            raise DataError(f"sigma2 must be positive, got {self.sigma2}")
        if self.max_iter < 1 or not self.tol > 0:
            raise DataError("max_iter must be >= 1 and tol positive")
        if self.trace_bound is not None and self.trace_bound < 0:
            raise DataError(f"trace_bound must be nonnegative, got {self.trace_bound}")

    def to_dict(self) -> Dict:
        return {
            'lam': self.lam, 'alpha': self.alpha, 'sigma2': self.sigma2,
            'max_iter': self.max_iter, 'tol': self.tol, 'factor_rank': self.factor_rank,
            'trace_bound': self.trace_bound, 'use_row_bias': self.use_row_bias,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'Hyperparams':
        return cls(**data)


@dataclass(frozen=True, eq=False)
class MeanModel:
    b_matrix: np.ndarray
    basis_m: KernelBasis
    basis_n: KernelBasis
    row_bias: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b_matrix, dtype=float)
        if b.shape != (self.basis_m.dim, self.basis_n.dim):
            raise DataError(
                f"Parameter matrix shape {b.shape} does not match bases "
                f"({self.basis_m.dim}, {self.basis_n.dim})"
            )
        bias = np.asarray(self.row_bias, dtype=float).reshape(-1)
        if len(bias) != self.basis_m.rows:
            raise DataError(f"Row bias length {len(bias)} does not match {self.basis_m.rows} rows")
        object.__setattr__(self, 'b_matrix', b)
        object.__setattr__(self, 'row_bias', bias)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.basis_m.rows, self.basis_n.rows

    @classmethod
    def zeros(cls, basis_m: KernelBasis, basis_n: KernelBasis) -> 'MeanModel':
        return cls(np.zeros((basis_m.dim, basis_n.dim)), basis_m, basis_n, np.zeros(basis_m.rows))

    def dense_mean(self, include_bias: bool = False) -> np.ndarray:
        psi = self.basis_m.entries @ self.b_matrix @ self.basis_n.entries.T
        if include_bias:
            psi = psi + self.row_bias[:, None]
        return psi


@dataclass
class FitReport:
    objective_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    stationarity: float = 0.0
    rank_of_b: int = 0
    converged: bool = True
    step_size: float = 0.0

    def to_dict(self) -> Dict:
        return {
            'objective_trace': [float(v) for v in self.objective_trace],
            'iterations': self.iterations,
            'stationarity': float(self.stationarity),
            'rank_of_b': self.rank_of_b,
            'converged': self.converged,
            'step_size': float(self.step_size),
        }


@dataclass
class PathPoint:
    alpha: float
    s: float
    lam: float
    model: Optional[MeanModel]
    report: Optional[FitReport]
    error: Optional[str] = None


def _svd(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        return linalg.svd(a, full_matrices=False, lapack_driver='gesdd')
    except linalg.LinAlgError:
        return linalg.svd(a, full_matrices=False, lapack_driver='gesvd')


def _singular_values(a: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return np.zeros(0)
    return linalg.svdvals(a)


def svd_thresholding(matrix: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Singular value soft-thresholding; returns (matrix, remaining singular values)"""
    if matrix.size == 0:
        return matrix.copy(), np.zeros(0)
    u, s, vt = _svd(matrix)
    shrunk = np.maximum(s - threshold, 0.0)
    keep = shrunk > 0
    return (u[:, keep] * shrunk[keep]) @ vt[keep], shrunk[keep]


def trace_norm(b_matrix: np.ndarray) -> float:
    return float(_singular_values(np.asarray(b_matrix, dtype=float)).sum())


def hilbert_norm_sq(model: MeanModel) -> float:
    """‖B‖_F², the RKHS norm of ψ under the basis map"""
    return float(np.sum(model.b_matrix ** 2))


def spectral_elastic_net(b_matrix: np.ndarray, a: float, b: float) -> float:
    xi = _singular_values(np.asarray(b_matrix, dtype=float))
    return float(a * np.sum(xi ** 2) + b * np.sum(xi))


def _observed(b: np.ndarray, basis_m: KernelBasis, basis_n: KernelBasis,
              rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    left = basis_m.entries[rows] @ b
    return np.einsum('ij,ij->i', left, basis_n.entries[cols])


def predict(model: MeanModel, rows: Sequence[int], cols: Sequence[int],
            include_bias: bool = False) -> np.ndarray:
    """G_M(m) B G_N(n)ᵀ (+ b_m) for each query (rows[i], cols[i])"""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    if len(rows) != len(cols):
        raise DataError("Query row and column arrays must have equal lengths")
    n_rows, n_cols = model.shape
    _check_indices(rows, cols, n_rows, n_cols, allow_duplicates=True)
    scores = _observed(model.b_matrix, model.basis_m, model.basis_n, rows, cols)
    if include_bias:
        scores = scores + model.row_bias[rows]
    return scores


def fit_row_bias(data: SparseObservations, predictions_without_bias: np.ndarray) -> np.ndarray:
    """b_m = mean residual over row m's observations; 0 for unobserved rows"""
    residual = data.values - np.asarray(predictions_without_bias, dtype=float)
    totals = np.bincount(data.rows, weights=residual, minlength=data.n_rows)
    counts = np.bincount(data.rows, minlength=data.n_rows)
    bias = np.zeros(data.n_rows)
    seen = counts > 0
    bias[seen] = totals[seen] / counts[seen]
    return bias


def _check_bases(data: SparseObservations, basis_m: KernelBasis, basis_n: KernelBasis) -> None:
    if basis_m.rows != data.n_rows or basis_n.rows != data.n_cols:
        raise DataError(
            f"Bases cover {basis_m.rows}x{basis_n.rows} but observations are "
            f"{data.n_rows}x{data.n_cols}"
        )


def objective(model: MeanModel, data: SparseObservations, h: Hyperparams) -> float:
    _check_bases(data, model.basis_m, model.basis_n)
    pred = _observed(model.b_matrix, model.basis_m, model.basis_n, data.rows, data.cols)
    if h.use_row_bias:
        pred = pred + model.row_bias[data.rows]
    loss = 0.5 * float(np.sum((data.values - pred) ** 2))
    penalty = 0.5 * h.lam * (1.0 - h.alpha) * hilbert_norm_sq(model)
    if h.alpha > 0:
        penalty += h.lam * h.alpha * trace_norm(model.b_matrix)
    return loss + penalty


def lambda_max(data: SparseObservations, g_m: KernelBasis, g_n: KernelBasis,
               use_row_bias: bool = False) -> float:
    """Largest singular value of the loss gradient at B = 0"""
    _check_bases(data, g_m, g_n)
    residual = data.values
    if use_row_bias:
        residual = residual - fit_row_bias(data, np.zeros(len(data)))[data.rows]
    if not np.any(residual):
        return 0.0
    grad = g_m.entries.T @ (data.as_sparse(residual) @ g_n.entries)
    return float(_singular_values(grad)[0]) if grad.size else 0.0


def default_s_grid(count: int = S_GRID_COUNT, low: float = S_GRID_LOW,
                   high: float = S_GRID_HIGH) -> List[float]:
    return list(np.logspace(math.log10(high), math.log10(low), count))


def _rank(b: np.ndarray) -> int:
    s = _singular_values(b)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > RANK_TOLERANCE * s[0]).sum())


class _Problem:
    """Smooth part, gradient and prox of the objective for fixed row biases"""

    def __init__(self, data: SparseObservations, g_m: KernelBasis, g_n: KernelBasis, h: Hyperparams):
        self.data = data
        self.g_m = g_m
        self.g_n = g_n
        self.ridge = h.lam * (1.0 - h.alpha)
        self.shrink = h.lam * h.alpha
        self.bias = np.zeros(data.n_rows)

    def residual(self, b: np.ndarray) -> np.ndarray:
        d = self.data
        return d.values - _observed(b, self.g_m, self.g_n, d.rows, d.cols) - self.bias[d.rows]

    def smooth(self, b: np.ndarray) -> Tuple[float, np.ndarray]:
        res = self.residual(b)
        return 0.5 * float(res @ res) + 0.5 * self.ridge * float(np.sum(b * b)), res

    def gradient(self, b: np.ndarray, res: np.ndarray) -> np.ndarray:
        loss_grad = self.g_m.entries.T @ (self.data.as_sparse(res) @ self.g_n.entries)
        return self.ridge * b - loss_grad

    def prox(self, b: np.ndarray, step: float) -> Tuple[np.ndarray, float]:
        """Returns (prox point, its trace-norm penalty)"""
        if self.shrink == 0:
            return b, 0.0
        z, s = svd_thresholding(b, step * self.shrink)
        return z, self.shrink * float(s.sum())

    def full(self, b: np.ndarray) -> float:
        value, _ = self.smooth(b)
        if self.shrink:
            value += self.shrink * trace_norm(b)
        return value

    def stationarity(self, b: np.ndarray, step: float) -> float:
        _, res = self.smooth(b)
        z, _ = self.prox(b - step * self.gradient(b, res), step)
        return float(linalg.norm(b - z)) / max(1.0, float(linalg.norm(b)))


def _solve_psd(system: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    if ridge > 0:
        try:
            return linalg.solve(system, rhs, assume_a='pos')
        except linalg.LinAlgError:
            pass
    return linalg.lstsq(system, rhs)[0]


def ridge_solve(data: SparseObservations, g_m: KernelBasis, g_n: KernelBasis, ridge: float) -> np.ndarray:
    """Exact minimizer of ½‖r − G_M B G_Nᵀ‖²_T + ½·ridge·‖B‖_F² (minimum norm when ridge = 0).

    Solves the |T| x |T| dual system (K_TT + ridge·I) c = r when there are fewer
    observations than coefficients, the primal normal equations otherwise.
    """
    gm_obs, gn_obs = g_m.entries[data.rows], g_n.entries[data.cols]
    n_obs, n_coef = len(data), g_m.dim * g_n.dim
    if n_obs <= n_coef:
        system = (gm_obs @ gm_obs.T) * (gn_obs @ gn_obs.T)
        system[np.diag_indices(n_obs)] += ridge
        c = _solve_psd(system, data.values, ridge)
        return gm_obs.T @ (c[:, None] * gn_obs)
    design = np.einsum('ti,tj->tij', gm_obs, gn_obs).reshape(n_obs, n_coef)
    system = design.T @ design
    system[np.diag_indices(n_coef)] += ridge
    return _solve_psd(system, design.T @ data.values, ridge).reshape(g_m.dim, g_n.dim)


def fit(data: SparseObservations, g_m: KernelBasis, g_n: KernelBasis, h: Hyperparams,
        init: Optional[MeanModel] = None) -> Tuple[MeanModel, FitReport]:
    """Minimize the spectral elastic net objective; warm-started from `init` when given.

    Pure ridge problems (α = 0, no row bias) small enough for a dense solve are
    solved exactly. Non-convergence within `h.max_iter` is reported
    (``FitReport.converged``), never raised.
    """
    _check_bases(data, g_m, g_n)
    problem = _Problem(data, g_m, g_n, h)
    b = np.zeros((g_m.dim, g_n.dim)) if init is None else np.array(init.b_matrix, dtype=float)
    if b.shape != (g_m.dim, g_n.dim):
        raise DataError(f"Warm start shape {b.shape} does not match bases ({g_m.dim}, {g_n.dim})")

    lam_max = lambda_max(data, g_m, g_n, h.use_row_bias)
    if h.lam * h.alpha >= lam_max:
        b = np.zeros_like(b)
        if h.use_row_bias:
            problem.bias = fit_row_bias(data, np.zeros(len(data)))
        report = FitReport(objective_trace=[problem.full(b)], converged=True)
        return MeanModel(b, g_m, g_n, problem.bias), report

    lipschitz = (g_m.operator_norm * g_n.operator_norm) ** 2 + problem.ridge
    lipschitz = lipschitz if lipschitz > 0 else 1.0

    if h.alpha == 0 and not h.use_row_bias and min(len(data), g_m.dim * g_n.dim) <= RIDGE_EXACT_MAX:
        start = problem.full(b)
        x = ridge_solve(data, g_m, g_n, problem.ridge)
        report = FitReport(objective_trace=[start, problem.full(x)], converged=True,
                           stationarity=problem.stationarity(x, 1.0 / lipschitz),
                           rank_of_b=_rank(x), step_size=1.0 / lipschitz)
        return MeanModel(x, g_m, g_n, problem.bias), report

    if h.use_row_bias:
        problem.bias = fit_row_bias(data, _observed(b, g_m, g_n, data.rows, data.cols))

    x, x_prev, y, t = b, b, b, 1.0
    f_x = problem.full(x)
    report = FitReport(objective_trace=[f_x], converged=False)
    for iteration in range(1, h.max_iter + 1):
        f_y, res_y = problem.smooth(y)
        grad = problem.gradient(y, res_y)
        while True:
            z, penalty_z = problem.prox(y - grad / lipschitz, 1.0 / lipschitz)
            f_z, _ = problem.smooth(z)
            diff = z - y
            bound = f_y + float(np.sum(grad * diff)) + 0.5 * lipschitz * float(np.sum(diff * diff))
            if f_z <= bound + 1e-12 * max(1.0, abs(f_y)):
                break
            lipschitz *= 2.0
        total_z = f_z + penalty_z

        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        accepted = total_z <= f_x
        x_prev, x = x, (z if accepted else x)
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        if not accepted:
            # momentum restart
            y, t = x, 1.0
        f_x = total_z if accepted else f_x

        if h.use_row_bias:
            problem.bias = fit_row_bias(data, _observed(x, g_m, g_n, data.rows, data.cols))
            f_x = problem.full(x)

        report.objective_trace.append(f_x)
        report.iterations = iteration
        report.stationarity = problem.stationarity(x, 1.0 / lipschitz)
        if report.stationarity <= h.tol:
            report.converged = True
            break

    if not report.converged:
        logger.warning("Mean fit did not converge in %d iterations (stationarity %.3e, tol %.1e)",
                       h.max_iter, report.stationarity, h.tol)
    report.rank_of_b = _rank(x)
    report.step_size = 1.0 / lipschitz
    return MeanModel(x, g_m, g_n, problem.bias), report


def fit_path(data: SparseObservations, g_m: KernelBasis, g_n: KernelBasis,
             alphas: Sequence[float], s_grid: Optional[Sequence[float]] = None,
             base: Optional[Hyperparams] = None, max_workers: int = 1) -> List[PathPoint]:
    """Warm-started regularization path λ = s·λ_max for every α (s descending)"""
    s_grid = default_s_grid() if s_grid is None else list(s_grid)
    if any(a < b for a, b in zip(s_grid, s_grid[1:])):
        raise DataError("s_grid must be sorted in descending order")
    base = base or Hyperparams(lam=0.0)
    lam_max = lambda_max(data, g_m, g_n, base.use_row_bias)

    def branch(alpha: float) -> List[PathPoint]:
        points = []
        previous = None
        for s in s_grid:
            lam = s * lam_max
            try:
                h = replace(base, lam=lam, alpha=alpha)
                model, report = fit(data, g_m, g_n, h, init=previous)
                previous = model
                points.append(PathPoint(alpha, s, lam, model, report))
            except TraceGPError as e:
                logger.warning("Path point alpha=%g s=%g failed: %s", alpha, s, e)
                points.append(PathPoint(alpha, s, lam, None, None, error=str(e)))
        return points

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        branches = list(pool.map(branch, alphas))
    return [point for points in branches for point in points]
