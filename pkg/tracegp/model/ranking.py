"""
Generative list-wise bipartite ranking on top of the MV-GP mean.

Each task m owns a target score vector r_m constrained to be compatible with
its labels (every positive scores at least as high as every negative) and to
lie in the ordered simplex, parametrized as r_m = γ_m(C x_m) with x_m on the
probability simplex. Training alternates a warm-started mean fit on the
current targets with per-task retargeting: block sorting picks γ_m, a
simplex-constrained least squares solve picks x_m.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.isotonic import isotonic_regression

from ..config.settings import (
    INNER_MAX_ITER, INNER_SOLVERS, INNER_TOL, OUTER_MAX_ITER, OUTER_TOL,
)
from ..errors import DataError
from . import meanfit
from .kernels import KernelBasis
from .meanfit import Hyperparams, MeanModel, SparseObservations, _check_indices

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LabeledObservations:
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if not (len(rows) == len(cols) == len(labels)):
            raise DataError("Label arrays must have equal lengths")
        if len(rows) == 0:
            raise DataError("Labeled observations must be nonempty")
        if not np.all(np.isin(labels, (1, -1))):
            raise DataError("Labels must be +1 or -1")
        _check_indices(rows, cols, self.n_rows, self.n_cols)
        object.__setattr__(self, 'rows', rows)
        object.__setattr__(self, 'cols', cols)
        object.__setattr__(self, 'labels', labels.astype(np.int8))

    @classmethod
    def from_triples(cls, n_rows: int, n_cols: int,
                     triples: Sequence[Tuple[int, int, int]]) -> 'LabeledObservations':
        arr = np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)
        return cls(n_rows, n_cols, arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    def subset(self, index: np.ndarray) -> 'LabeledObservations':
        return LabeledObservations(self.n_rows, self.n_cols, self.rows[index], self.cols[index],
                                   self.labels[index])

    def task_index(self) -> Dict[int, np.ndarray]:
        """Observation positions per task, in observation order"""
        order = np.argsort(self.rows, kind='stable')
        tasks, starts = np.unique(self.rows[order], return_index=True)
        groups = np.split(order, starts[1:])
        return {int(m): g for m, g in zip(tasks, groups)}


class OrderSimplexMap:
    """The upper-triangular map C with C[i, j] = 1/j for j >= i (1-indexed).

    C maps the probability simplex onto the ordered simplex (non-increasing
    probability vectors). All products run in O(d) through suffix/prefix sums.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise DataError(f"Order simplex dimension must be at least 1, got {dim}")
        self.dim = dim
        self._inv_index = 1.0 / np.arange(1, dim + 1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        weighted = np.asarray(x, dtype=float) * self._inv_index
        return np.cumsum(weighted[::-1])[::-1]

    def transpose_apply(self, y: np.ndarray) -> np.ndarray:
        return np.cumsum(np.asarray(y, dtype=float)) * self._inv_index

    def inverse_apply(self, r: np.ndarray) -> np.ndarray:
        """x with C x = r, for r non-increasing: x_j = j (r_j - r_{j+1})"""
        r = np.asarray(r, dtype=float)
        return np.arange(1, self.dim + 1) * (r - np.append(r[1:], 0.0))

    def dense(self) -> np.ndarray:
        return np.triu(np.tile(self._inv_index, (self.dim, 1)))


def build_c_apply(dim: int) -> OrderSimplexMap:
    return OrderSimplexMap(dim)


def check_compatibility(scores: Sequence[float], labels: Sequence[int]) -> bool:
    """min over positives >= max over negatives; vacuously true for a single class"""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError("Scores and labels must have equal lengths")
    pos, neg = scores[labels > 0], scores[labels <= 0]
    if pos.size == 0 or neg.size == 0:
        return True
    return bool(pos.min() >= neg.max())


def block_sort_permutation(psi: Sequence[float], labels: Sequence[int]) -> np.ndarray:
    """Positives first, then negatives; ψ descending within each block, ties by index"""
    psi = np.asarray(psi, dtype=float)
    labels = np.asarray(labels)
    if psi.shape != labels.shape:
        raise DataError("Scores and labels must have equal lengths")
    index = np.arange(len(psi))
    # lexsort: last key is primary
    return np.lexsort((index, -psi, labels <= 0))


def simplex_projection(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex"""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True)
class RankTrainConfig:
    hyperparams: Hyperparams
    outer_max_iter: int = OUTER_MAX_ITER
    outer_tol: float = OUTER_TOL
    inner_max_iter: int = INNER_MAX_ITER
    inner_tol: float = INNER_TOL
    inner_solver: str = 'eg'
    workers: int = 1

    def __post_init__(self):
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise DataError("Tolerances must be positive")
        if self.outer_max_iter < 1 or self.inner_max_iter < 1:
            raise DataError("Iteration limits must be at least 1")
        if self.inner_solver not in INNER_SOLVERS:
            raise DataError(f"Unknown inner solver '{self.inner_solver}'; choose from {INNER_SOLVERS}")


@dataclass(frozen=True, eq=False)
class TaskState:
    index: np.ndarray
    labels: np.ndarray
    x: np.ndarray
    perm: np.ndarray
    converged: bool = True
    skipped: bool = False

    @property
    def n_positive(self) -> int:
        return int((self.labels > 0).sum())

    @property
    def targets(self) -> np.ndarray:
        """r_m in original item order: item perm[i] receives (C x)_i"""
        r = np.empty(len(self.x))
        r[self.perm] = OrderSimplexMap(len(self.x)).apply(self.x)
        return r


@dataclass(frozen=True, eq=False)
class RankingState:
    tasks: Dict[int, TaskState]

    def is_feasible(self) -> bool:
        return all(check_compatibility(t.targets, t.labels) for t in self.tasks.values())


@dataclass
class TrainTrace:
    steps: List[str] = field(default_factory=list)
    objective: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    nonconverged_tasks: int = 0
    fit_reports: List[meanfit.FitReport] = field(default_factory=list)

    def record(self, step: str, value: float) -> None:
        self.steps.append(step)
        self.objective.append(float(value))

    def to_dict(self) -> Dict:
        return {
            'steps': list(self.steps),
            'objective': list(self.objective),
            'iterations': self.iterations,
            'converged': self.converged,
            'nonconverged_tasks': self.nonconverged_tasks,
        }


def _task_value(cmap: OrderSimplexMap, x: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    res = cmap.apply(x) - target
    return 0.5 * float(res @ res), res


def _simplex_gap(x: np.ndarray, grad: np.ndarray) -> float:
    # Frank-Wolfe gap on the simplex; zero exactly at the optimum
    return float(grad @ x - grad.min())


def _solve_projected(target: np.ndarray, x: np.ndarray, max_iter: int,
                     tol: float) -> Tuple[np.ndarray, bool]:
    cmap = OrderSimplexMap(len(target))
    # ‖C‖² <= max column sum x max row sum = harmonic number
    step = 1.0 / float(np.sum(1.0 / np.arange(1, len(target) + 1)))
    value, res = _task_value(cmap, x, target)
    for _ in range(max_iter):
        grad = cmap.transpose_apply(res)
        if _simplex_gap(x, grad) <= tol:
            return x, True
        candidate = simplex_projection(x - step * grad)
        cand_value, cand_res = _task_value(cmap, candidate, target)
        if cand_value > value:
            return x, False
        x, value, res = candidate, cand_value, cand_res
    return x, _simplex_gap(x, cmap.transpose_apply(res)) <= tol


def _solve_eg(target: np.ndarray, x: np.ndarray, max_iter: int,
              tol: float) -> Tuple[np.ndarray, bool]:
    """Exponentiated gradient with backtracking; falls back to projected gradient on a stall"""
    if np.any(x <= 0):
        return _solve_projected(target, x, max_iter, tol)
    cmap = OrderSimplexMap(len(target))
    value, res = _task_value(cmap, x, target)
    step = 1.0
    for iteration in range(max_iter):
        grad = cmap.transpose_apply(res)
        if _simplex_gap(x, grad) <= tol:
            return x, True
        while True:
            logits = np.log(x) - step * grad
            candidate = np.exp(logits - logits.max())
            candidate /= candidate.sum()
            cand_value, cand_res = _task_value(cmap, candidate, target)
            if cand_value <= value:
                break
            step *= 0.5
            if step < 1e-14:
                logger.debug("EG stalled after %d iterations; switching to projected gradient", iteration)
                return _solve_projected(target, x, max_iter - iteration, tol)
        if np.any(candidate <= 0):
            return _solve_projected(target, candidate, max_iter - iteration, tol)
        x, value, res = candidate, cand_value, cand_res
        step = min(step * 2.0, 1e6)
    return x, _simplex_gap(x, cmap.transpose_apply(res)) <= tol


def _solve_isotonic(target: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Exact projection onto the ordered simplex: isotonic fit, then simplex projection"""
    cmap = OrderSimplexMap(len(target))
    descending = isotonic_regression(target, increasing=False)
    x = np.clip(cmap.inverse_apply(simplex_projection(descending)), 0.0, None)
    return x / x.sum(), True


def solve_simplex_least_squares(target: np.ndarray, x0: np.ndarray, solver: str = 'eg',
                                max_iter: int = INNER_MAX_ITER,
                                tol: float = INNER_TOL) -> Tuple[np.ndarray, bool]:
    """min over the simplex of ½‖C x - target‖²; never ends worse than x0"""
    target = np.asarray(target, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if solver == 'isotonic':
        x, converged = _solve_isotonic(target)
        cmap = OrderSimplexMap(len(target))
        if _task_value(cmap, x, target)[0] > _task_value(cmap, x0, target)[0]:
            return x0, converged
        return x, converged
    if solver == 'projected':
        return _solve_projected(target, x0, max_iter, tol)
    return _solve_eg(target, x0, max_iter, tol)


def _uniform(d: int) -> np.ndarray:
    return np.full(d, 1.0 / d)


def task_objective(task: TaskState, psi: np.ndarray) -> float:
    """½‖C x - γ(ψ)‖² for the task's current x and permutation"""
    cmap = OrderSimplexMap(len(task.x))
    return _task_value(cmap, task.x, np.asarray(psi, dtype=float)[task.perm])[0]


def retarget_task(psi: Sequence[float], labels: Sequence[int], state: TaskState,
                  cfg: RankTrainConfig) -> TaskState:
    """Block sort then simplex solve for one task; the task objective does not increase"""
    psi = np.asarray(psi, dtype=float)
    labels = np.asarray(labels)
    perm = block_sort_permutation(psi, labels)
    n_pos = int((labels > 0).sum())
    if n_pos == 0 or n_pos == len(labels):
        return replace(state, x=_uniform(len(labels)), perm=perm, converged=True, skipped=True)
    x, converged = solve_simplex_least_squares(psi[perm], state.x, cfg.inner_solver,
                                               cfg.inner_max_iter, cfg.inner_tol)
    return replace(state, x=x, perm=perm, converged=converged, skipped=False)


def initial_state(labels: LabeledObservations, x_init: Optional[Dict[int, np.ndarray]] = None) -> RankingState:
    """x_m uniform (or given), γ_m from ψ = 0: index order within each class block"""
    tasks = {}
    for m, index in labels.task_index().items():
        task_labels = labels.labels[index]
        d = len(index)
        x = _uniform(d) if x_init is None or m not in x_init else np.asarray(x_init[m], dtype=float)
        if x.shape != (d,) or np.any(x < 0) or abs(x.sum() - 1.0) > 1e-10:
            raise DataError(f"Initial x for task {m} is not a simplex vector of length {d}")
        n_pos = int((task_labels > 0).sum())
        tasks[m] = TaskState(index, task_labels, x, block_sort_permutation(np.zeros(d), task_labels),
                             skipped=n_pos in (0, d))
    return RankingState(tasks)


def observations_from_state(labels: LabeledObservations, state: RankingState) -> SparseObservations:
    values = np.zeros(len(labels))
    for task in state.tasks.values():
        values[task.index] = task.targets
    return SparseObservations(labels.n_rows, labels.n_cols, labels.rows, labels.cols, values)


def joint_objective(model: MeanModel, state: RankingState, labels: LabeledObservations,
                    h: Hyperparams) -> float:
    """½ Σ (r - ψ)² + λ(1-α)/2 ‖B‖_F² + λα ‖B‖_tr on the current targets; +inf when infeasible.

    This is the objective each ψ half-step minimizes, so both half-steps descend on it.
    For λ(1-α) = σ² it is σ² times the Gaussian negative log posterior with trace weight λα/σ².
    """
    if not state.is_feasible():
        return float('inf')
    return meanfit.objective(model, observations_from_state(labels, state), h)


def ranking_lambda_max(labels: LabeledObservations, g_m: KernelBasis, g_n: KernelBasis,
                       use_row_bias: bool = False) -> float:
    """λ_max on the initial targets, the top of the warm-start path"""
    obs = observations_from_state(labels, initial_state(labels))
    return meanfit.lambda_max(obs, g_m, g_n, use_row_bias)


def _retarget_all(psi: np.ndarray, state: RankingState, cfg: RankTrainConfig) -> RankingState:
    ids = sorted(state.tasks)

    def work(m: int) -> TaskState:
        task = state.tasks[m]
        return retarget_task(psi[task.index], task.labels, task, cfg)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        updated = list(pool.map(work, ids))
    return RankingState(dict(zip(ids, updated)))


def train(labels: LabeledObservations, g_m: KernelBasis, g_n: KernelBasis, cfg: RankTrainConfig,
          init_model: Optional[MeanModel] = None,
          init_state: Optional[RankingState] = None) -> Tuple[MeanModel, RankingState, TrainTrace]:
    """Alternate the mean update and per-task retargeting until the objective settles"""
    h = cfg.hyperparams
    state = init_state or initial_state(labels)
    model = init_model or MeanModel.zeros(g_m, g_n)
    trace = TrainTrace()
    trace.record('init', joint_objective(model, state, labels, h))

    for outer in range(1, cfg.outer_max_iter + 1):
        start = trace.objective[-1]
        model, report = meanfit.fit(observations_from_state(labels, state), g_m, g_n, h, init=model)
        trace.fit_reports.append(report)
        trace.record('mean', joint_objective(model, state, labels, h))

        psi = meanfit.predict(model, labels.rows, labels.cols, include_bias=h.use_row_bias)
        state = _retarget_all(psi, state, cfg)
        trace.record('targets', joint_objective(model, state, labels, h))
        trace.iterations = outer

        end = trace.objective[-1]
        if start - end <= cfg.outer_tol * max(abs(start), 1e-300):
            trace.converged = True
            break

    trace.nonconverged_tasks = sum(not t.converged for t in state.tasks.values())
    if trace.nonconverged_tasks:
        logger.warning("%d tasks did not reach the inner tolerance", trace.nonconverged_tasks)
    if not trace.converged:
        logger.warning("Ranking trainer stopped after %d outer iterations", trace.iterations)
    return model, state, trace


def sample_labels(z: np.ndarray, positives_per_row: int, seed: int, sigma2: float = 0.0,
                  negatives_per_row: Optional[int] = None) -> LabeledObservations:
    """Top-q entries of each (noisy) row become positives; a matching random sample of the rest negatives"""
    z = np.asarray(z, dtype=float)
    n_rows, n_cols = z.shape
    q = positives_per_row
    if not 1 <= q < n_cols:
        raise DataError(f"positives_per_row must lie in [1, {n_cols}), got {q}")
    if sigma2 < 0:
        raise DataError(f"sigma2 must be nonnegative, got {sigma2}")
    n_neg = min(q if negatives_per_row is None else negatives_per_row, n_cols - q)
    rng = np.random.default_rng(seed)
    rows, cols, labels = [], [], []
    for m in range(n_rows):
        scores = z[m] + (np.sqrt(sigma2) * rng.standard_normal(n_cols) if sigma2 > 0 else 0.0)
        order = np.argsort(-scores, kind='stable')
        pos, rest = order[:q], order[q:]
        neg = rng.choice(rest, size=n_neg, replace=False)
        chosen = np.concatenate([pos, neg])
        rows.append(np.full(len(chosen), m))
        cols.append(chosen)
        labels.append(np.concatenate([np.ones(q), -np.ones(n_neg)]))
    return LabeledObservations(n_rows, n_cols, np.concatenate(rows), np.concatenate(cols),
                               np.concatenate(labels).astype(np.int64))
