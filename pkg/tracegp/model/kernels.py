"""
Graph kernels and their square-root bases.

A row (or column) covariance is built from an interaction graph as the
exponential of the negated normalized Laplacian, optionally shifted by the
identity, and factored as K = G Gᵀ so that the mean function can be
parametrized in basis coordinates.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from ..config.settings import EIG_FLOOR, PSD_TOLERANCE, SYMMETRY_TOLERANCE
from ..errors import DataError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphAdjacency:
    n_nodes: int
    edges: Tuple[Tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if self.n_nodes < 1:
            raise DataError(f"Invalid graph: n_nodes must be positive, got {self.n_nodes}")
        for i, j, w in self.edges:
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise DataError(f"Invalid graph: edge ({i}, {j}) outside [0, {self.n_nodes})")
            if i == j:
                raise DataError(f"Invalid graph: self-loop on node {i}")
            if not np.isfinite(w) or w < 0:
                raise DataError(f"Invalid graph: edge ({i}, {j}) has negative or non-finite weight {w}")

    def to_dense(self) -> np.ndarray:
        """Symmetric adjacency matrix; a repeated undirected edge keeps its last weight"""
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, j, w in self.edges:
            a[i, j] = w
            a[j, i] = w
        return a


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Symmetric PSD covariance over one index set.

    The eigendecomposition is cached once computed (ascending eigenvalues, as
    returned by ``scipy.linalg.eigh``).
    """
    entries: np.ndarray
    _eig: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        k = np.asarray(self.entries, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] < 1:
            raise DataError(f"Kernel must be a nonempty square matrix, got shape {k.shape}")
        _check_symmetric(k, 'kernel')
        object.__setattr__(self, 'entries', 0.5 * (k + k.T))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def eigh(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self._eig:
            values, vectors = linalg.eigh(self.entries)
            self._eig['values'] = values
            self._eig['vectors'] = vectors
        return self._eig['values'], self._eig['vectors']

    def check_psd(self) -> None:
        values, _ = self.eigh()
        scale = max(float(values[-1]), 0.0)
        if values[0] < -PSD_TOLERANCE * max(scale, 1e-300):
            raise NumericalError(
                f"Kernel is not PSD: minimum eigenvalue {values[0]:.3e} below "
                f"-{PSD_TOLERANCE:g} x maximum eigenvalue {scale:.3e}"
            )

    @classmethod
    def from_eigh(cls, values: np.ndarray, vectors: np.ndarray) -> 'KernelMatrix':
        k = cls((vectors * values) @ vectors.T)
        k._eig['values'] = np.asarray(values, dtype=float)
        k._eig['vectors'] = np.asarray(vectors, dtype=float)
        return k


@dataclass(frozen=True, eq=False)
class KernelBasis:
    """Factor G (rows x dim) with G Gᵀ equal to the source kernel"""
    entries: np.ndarray

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def operator_norm(self) -> float:
        if self.dim == 0:
            return 0.0
        return float(linalg.norm(self.entries, 2))

    def gram(self) -> np.ndarray:
        return self.entries @ self.entries.T


def _check_symmetric(a: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOLERANCE * scale:
        raise DataError(f"Invalid {name}: matrix is not symmetric")


def normalized_laplacian(graph: GraphAdjacency) -> np.ndarray:
    """L = I - D^{-1/2} A D^{-1/2}; isolated nodes get D^{-1/2} = 0"""
    a = graph.to_dense()
    degree = a.sum(axis=1)
    inv_sqrt = np.zeros_like(degree)
    connected = degree > 0
    inv_sqrt[connected] = 1.0 / np.sqrt(degree[connected])
    n_isolated = int((~connected).sum())
    if n_isolated:
        logger.debug("Graph has %d isolated nodes", n_isolated)
    return np.eye(graph.n_nodes) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def exponential_kernel(laplacian: np.ndarray, add_identity: bool = False) -> KernelMatrix:
    """K = exp(-L) via symmetric eigendecomposition, plus I when requested"""
    lap = np.asarray(laplacian, dtype=float)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise DataError(f"Laplacian must be square, got shape {lap.shape}")
    _check_symmetric(lap, 'Laplacian')
    values, vectors = linalg.eigh(0.5 * (lap + lap.T))
    spectrum = np.exp(-values)
    if add_identity:
        spectrum = spectrum + 1.0
    order = np.argsort(spectrum, kind='stable')
    kernel = KernelMatrix.from_eigh(spectrum[order], vectors[:, order])
    kernel.check_psd()
    return kernel


def kernel_basis(kernel: KernelMatrix, eig_floor: float = EIG_FLOOR) -> KernelBasis:
    """Square-root basis G = U_kept Λ_kept^{1/2}, dropping eigenvalues below eig_floor·λ_max"""
    kernel.check_psd()
    values, vectors = kernel.eigh()
    top = float(values[-1])
    if top <= 0:
        raise NumericalError("Kernel has no positive eigenvalue; cannot build a basis")
    keep = values >= eig_floor * top
    # descending so the leading columns carry the dominant directions
    kept_values = values[keep][::-1]
    kept_vectors = vectors[:, keep][:, ::-1]
    dropped = int((~keep).sum())
    if dropped:
        logger.debug("Dropped %d numerically null directions (D=%d)", dropped, int(keep.sum()))
    return KernelBasis(kept_vectors * np.sqrt(kept_values))


def identity_kernel(n: int) -> KernelMatrix:
    return KernelMatrix.from_eigh(np.ones(n), np.eye(n))


def squared_exponential_kernel(positions: Sequence[float], length_scale: float) -> KernelMatrix:
    """Smooth kernel exp(-(x - x')² / 2ℓ²) over 1-D positions"""
    if length_scale <= 0:
        raise DataError(f"length_scale must be positive, got {length_scale}")
    x = np.asarray(positions, dtype=float).reshape(-1)
    sq = (x[:, None] - x[None, :]) ** 2
    return KernelMatrix(np.exp(-0.5 * sq / length_scale ** 2))


def truncate_rank(kernel: KernelMatrix, rank: int) -> KernelMatrix:
    """Keep the top `rank` eigenpairs"""
    if rank < 1:
        raise DataError(f"rank must be at least 1, got {rank}")
    values, vectors = kernel.eigh()
    values = np.clip(values, 0.0, None)
    if rank < len(values):
        values = values.copy()
        values[:len(values) - rank] = 0.0
    return KernelMatrix.from_eigh(values, vectors)


def spectrum_summary(kernel: KernelMatrix, eig_floor: float = EIG_FLOOR) -> Dict[str, float]:
    values, _ = kernel.eigh()
    top = float(values[-1])
    return {
        'dim': kernel.dim,
        'rank': int((values >= eig_floor * top).sum()) if top > 0 else 0,
        'min_eigenvalue': float(values[0]),
        'max_eigenvalue': top,
        'trace': float(np.trace(kernel.entries)),
    }


def basis_for(kernel: Optional[KernelMatrix], n: int, eig_floor: float = EIG_FLOOR) -> KernelBasis:
    """Basis of `kernel`, or the identity basis when no kernel is configured"""
    if kernel is None:
        return KernelBasis(np.eye(n))
    if kernel.dim != n:
        raise DataError(f"Kernel dimension {kernel.dim} does not match index set size {n}")
    return kernel_basis(kernel, eig_floor)
