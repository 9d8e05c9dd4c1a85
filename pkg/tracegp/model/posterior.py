"""
Closed-form matrix-variate GP posterior quantities.

The prior covariance is Kronecker structured,
k((m, n), (m', n')) = K_M(m, m') K_N(n, n'), so every quantity here is
assembled from index gathers on the two small kernels. These routines form
dense |T| x |T| systems and are meant for oracle-scale problems; the
scalable mean lives in ``meanfit``.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from ..config.settings import (
    EIG_FLOOR, FACTOR_JITTER, FACTOR_RESTARTS, JITTER_MAX, JITTER_START,
)
from ..errors import DataError, NumericalError
from .kernels import KernelBasis, KernelMatrix, kernel_basis
from .meanfit import MeanModel, SparseObservations, _check_indices, predict, trace_norm

logger = logging.getLogger(__name__)

KernelLike = Union[KernelMatrix, np.ndarray]


def _entries(kernel: KernelLike) -> np.ndarray:
    return kernel.entries if isinstance(kernel, KernelMatrix) else np.asarray(kernel, dtype=float)


def _kron_block(k_m: np.ndarray, k_n: np.ndarray, rows_a: np.ndarray, cols_a: np.ndarray,
                rows_b: np.ndarray, cols_b: np.ndarray) -> np.ndarray:
    return k_m[np.ix_(rows_a, rows_b)] * k_n[np.ix_(cols_a, cols_b)]


def cholesky_with_jitter(a: np.ndarray, label: str = 'system') -> Tuple[Tuple[np.ndarray, bool], float]:
    """Cholesky factor of `a`, escalating diagonal jitter from 1e-12·tr to 1e-6·tr on failure"""
    n = a.shape[0]
    trace = float(np.trace(a)) or 1.0
    jitter = 0.0
    while True:
        try:
            return linalg.cho_factor(a + jitter * np.eye(n), lower=True), jitter
        except linalg.LinAlgError:
            jitter = JITTER_START * trace if jitter == 0 else jitter * 10.0
            if jitter > JITTER_MAX * trace * (1 + 1e-9):
                raise NumericalError(f"Cholesky of {label} failed even with jitter {JITTER_MAX:g}·trace")
            logger.warning("Cholesky of %s failed; retrying with jitter %.3e", label, jitter)


def _as_index(values: Sequence[int]) -> np.ndarray:
    return np.asarray(values, dtype=np.int64).reshape(-1)


def posterior_mean_closed_form(k_m: KernelLike, k_n: KernelLike, rows: Sequence[int],
                               cols: Sequence[int], values: Sequence[float],
                               sigma2: float) -> np.ndarray:
    """Φ = K_{·T} (K_TT + σ²I)⁻¹ r over the full M x N index set"""
    km, kn = _entries(k_m), _entries(k_n)
    rows, cols = _as_index(rows), _as_index(cols)
    r = np.asarray(values, dtype=float).reshape(-1)
    if not (len(rows) == len(cols) == len(r)):
        raise DataError("Training index and value arrays must have equal lengths")
    if sigma2 < 0:
        raise DataError(f"sigma2 must be nonnegative, got {sigma2}")
    _check_indices(rows, cols, km.shape[0], kn.shape[0], allow_duplicates=sigma2 > 0)
    if len(r) == 0:
        return np.zeros((km.shape[0], kn.shape[0]))
    system = _kron_block(km, kn, rows, cols, rows, cols) + sigma2 * np.eye(len(r))
    factor, _ = cholesky_with_jitter(system, 'posterior mean system')
    weights = linalg.cho_solve(factor, r)
    return km[:, rows] @ (weights[:, None] * kn[cols, :])


@dataclass(frozen=True, eq=False)
class PosteriorGP:
    kernel_m: KernelMatrix
    kernel_n: KernelMatrix
    rows: np.ndarray
    cols: np.ndarray
    sigma2: float
    mean_model: Optional[MeanModel] = None

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DataError(f"sigma2 must be positive, got {self.sigma2}")
        rows, cols = _as_index(self.rows), _as_index(self.cols)
        if len(rows) != len(cols):
            raise DataError("Training row and column arrays must have equal lengths")
        _check_indices(rows, cols, self.kernel_m.dim, self.kernel_n.dim)
        object.__setattr__(self, 'rows', rows)
        object.__setattr__(self, 'cols', cols)

    @cached_property
    def _factor(self):
        km, kn = self.kernel_m.entries, self.kernel_n.entries
        system = _kron_block(km, kn, self.rows, self.cols, self.rows, self.cols)
        system = system + self.sigma2 * np.eye(len(self.rows))
        factor, _ = cholesky_with_jitter(system, 'posterior covariance system')
        return factor

    def mean(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        """Noise-free expected scores ψ(m, n) from the fitted mean model"""
        if self.mean_model is None:
            raise DataError("PosteriorGP has no mean model")
        return predict(self.mean_model, rows, cols, include_bias=False)


def posterior_covariance(gp: PosteriorGP, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    """Σ_q = K_qq - K_qT (K_TT + σ²I)⁻¹ K_Tq for a batch of queries"""
    rows, cols = _as_index(rows), _as_index(cols)
    if len(rows) != len(cols):
        raise DataError("Query row and column arrays must have equal lengths")
    km, kn = gp.kernel_m.entries, gp.kernel_n.entries
    _check_indices(rows, cols, km.shape[0], kn.shape[0], allow_duplicates=True)
    prior = _kron_block(km, kn, rows, cols, rows, cols)
    if len(gp.rows) == 0:
        return prior
    cross = _kron_block(km, kn, gp.rows, gp.cols, rows, cols)
    reduction = cross.T @ linalg.cho_solve(gp._factor, cross)
    cov = prior - reduction
    return 0.5 * (cov + cov.T)


def sample_prior(k_m: KernelMatrix, k_n: KernelMatrix, seed: int,
                 eig_floor: float = EIG_FLOOR) -> np.ndarray:
    """Z = G_M W G_Nᵀ with W i.i.d. standard normal, an exact draw from GP(0, K_N ⊗ K_M)"""
    g_m = kernel_basis(k_m, eig_floor).entries
    g_n = kernel_basis(k_n, eig_floor).entries
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((g_m.shape[1], g_n.shape[1]))
    return g_m @ w @ g_n.T


@dataclass(frozen=True, eq=False)
class FactorModel:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.u.shape[1] < 1 or self.u.shape[1] != self.v.shape[1]:
            raise DataError("Factor matrices must share a rank F >= 1")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise NumericalError("Factor matrices contain non-finite entries")

    @property
    def rank(self) -> int:
        return self.u.shape[1]


def factor_gp_objective(data: SparseObservations, g_m: KernelBasis, g_n: KernelBasis,
                        p: np.ndarray, q: np.ndarray, sigma2: float) -> float:
    """(1/σ²) Σ (r - u_m·v_n)² + tr(UᵀK_M⁻¹U) + tr(VᵀK_N⁻¹V) with U = G_M P, V = G_N Q"""
    u = g_m.entries @ p
    v = g_n.entries @ q
    res = data.values - np.einsum('ij,ij->i', u[data.rows], v[data.cols])
    return float(res @ res) / sigma2 + float(np.sum(p * p)) + float(np.sum(q * q))


def trace_equivalent_objective(model: MeanModel, data: SparseObservations, sigma2: float) -> float:
    """(1/σ²) Σ (r - ψ)² + 2‖B‖_tr: the factor objective's value at a balanced factorization of B"""
    pred = predict(model, data.rows, data.cols)
    res = data.values - pred
    return float(res @ res) / sigma2 + 2.0 * trace_norm(model.b_matrix)


def _ridge_solve(design: np.ndarray, target: np.ndarray, sigma2: float) -> np.ndarray:
    gram = design.T @ design + sigma2 * np.eye(design.shape[1])
    try:
        factor = linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError:
        jitter = FACTOR_JITTER * float(np.trace(gram))
        logger.warning("Singular ridge system in factor GP; adding jitter %.3e", jitter)
        factor = linalg.cho_factor(gram + jitter * np.eye(gram.shape[0]), lower=True)
    return linalg.cho_solve(factor, design.T @ target)


def _factor_design(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # row t is vec(outer(left[t], right[t])) matching a row-major parameter ravel
    return (left[:, :, None] * right[:, None, :]).reshape(left.shape[0], -1)


def factor_gp_map(data: SparseObservations, k_m: KernelMatrix, k_n: KernelMatrix, rank: int,
                  sigma2: float, restarts: int = FACTOR_RESTARTS, seed: int = 0,
                  max_iter: int = 500, tol: float = 1e-10,
                  eig_floor: float = EIG_FLOOR) -> Tuple[FactorModel, float]:
    """MAP estimate of the factor GP by alternating exact ridge solves.

    Non-convex: the best local optimum over `restarts` random initializations
    is returned.
    """
    if rank < 1:
        raise DataError(f"Factor rank must be at least 1, got {rank}")
    if not sigma2 > 0:
        raise DataError(f"sigma2 must be positive, got {sigma2}")
    g_m, g_n = kernel_basis(k_m, eig_floor), kernel_basis(k_n, eig_floor)
    if g_m.rows != data.n_rows or g_n.rows != data.n_cols:
        raise DataError("Kernel dimensions do not match observations")
    rng = np.random.default_rng(seed)
    gm_obs, gn_obs = g_m.entries[data.rows], g_n.entries[data.cols]

    best = None
    for restart in range(max(1, restarts)):
        p = rng.standard_normal((g_m.dim, rank)) / np.sqrt(rank)
        q = rng.standard_normal((g_n.dim, rank)) / np.sqrt(rank)
        value = factor_gp_objective(data, g_m, g_n, p, q, sigma2)
        for _ in range(max_iter):
            h = (g_n.entries @ q)[data.cols]
            p = _ridge_solve(_factor_design(gm_obs, h), data.values, sigma2).reshape(g_m.dim, rank)
            e = (g_m.entries @ p)[data.rows]
            q = _ridge_solve(_factor_design(gn_obs, e), data.values, sigma2).reshape(g_n.dim, rank)
            updated = factor_gp_objective(data, g_m, g_n, p, q, sigma2)
            done = value - updated <= tol * max(1.0, abs(value))
            value = updated
            if done:
                break
        logger.debug("Factor GP restart %d: objective %.6e", restart, value)
        if best is None or value < best[2]:
            best = (p, q, value)

    p, q, value = best
    return FactorModel(g_m.entries @ p, g_n.entries @ q, p, q), value


def variational_trace_identity(u: np.ndarray, v: np.ndarray) -> Tuple[float, float]:
    """(½(‖U‖_F² + ‖V‖_F²), ‖UVᵀ‖_tr); the first bounds the second from above"""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if v.ndim == 1:
        v = v.reshape(-1, 1)
    if u.shape[1] != v.shape[1]:
        raise DataError(f"Factor shapes {u.shape} and {v.shape} are not conformable")
    lhs = 0.5 * (float(np.sum(u * u)) + float(np.sum(v * v)))
    product = u @ v.T
    rhs = float(linalg.svdvals(product).sum()) if product.size else 0.0
    return lhs, rhs
