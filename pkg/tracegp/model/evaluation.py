"""
Ranking metrics, negative-set sampling, ensembles and cross-validation splits.

Metrics are computed per task (row) on the candidate items left after
removing that task's training positives, then macro-averaged over the tasks
that still have at least one relevant item.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from ..config.settings import EVAL_POOLS, N_FOLDS, N_NEGATIVE_SETS, SPLIT_MODES, TOP_K
from ..errors import DataError
from .meanfit import MeanModel, predict
from .ranking import LabeledObservations

logger = logging.getLogger(__name__)

ScoreSource = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True, eq=False)
class RankMetrics:
    auc: float
    map100: float
    precision_at: np.ndarray
    recall_at: np.ndarray
    n_tasks_evaluated: int
    n_tasks_excluded: int = 0

    @property
    def top_k(self) -> int:
        return len(self.precision_at)

    def to_dict(self) -> Dict:
        return {
            'auc': float(self.auc),
            'map100': float(self.map100),
            'p100': float(self.precision_at[-1]),
            'r100': float(self.recall_at[-1]),
            'precision_at': [float(v) for v in self.precision_at],
            'recall_at': [float(v) for v in self.recall_at],
            'n_tasks_evaluated': self.n_tasks_evaluated,
            'n_tasks_excluded': self.n_tasks_excluded,
        }


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Fraction of correctly ordered (positive, negative) pairs, ties counted ½; NaN for one class"""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(labels) > 0
    if scores.shape != positive.shape:
        raise DataError("Scores and labels must have equal lengths")
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float('nan')
    ranks = rankdata(scores, method='average')
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sort_labels(scores: Sequence[float], relevant: Sequence[bool],
                items: Optional[Sequence[int]] = None) -> np.ndarray:
    """Relevance indicators ordered by descending score, ties by ascending item index.

    `items` holds the item (column) index of each entry; positions are used when it is omitted.
    """
    scores = np.asarray(scores, dtype=float)
    items = np.arange(len(scores)) if items is None else np.asarray(items, dtype=np.int64)
    if items.shape != scores.shape:
        raise DataError("Scores and items must have equal lengths")
    order = np.lexsort((items, -scores))
    return np.asarray(relevant, dtype=bool)[order]


def _hits(sorted_labels: Sequence, k: int) -> int:
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    return int(np.count_nonzero(np.asarray(sorted_labels)[:k] > 0))


def precision_at_k(sorted_labels: Sequence, k: int) -> float:
    return _hits(sorted_labels, k) / k


def recall_at_k(sorted_labels: Sequence, k: int, n_relevant: int) -> float:
    """hits in the top k over min(G, k); NaN when G = 0"""
    hits = _hits(sorted_labels, k)
    if n_relevant <= 0:
        return float('nan')
    return hits / min(n_relevant, k)


def average_precision_at(sorted_labels: Sequence, k: int, n_relevant: int) -> float:
    """Σ_{l<=k} 1[relevant at l]·P@l / min(G, k); NaN when G = 0"""
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if n_relevant <= 0:
        return float('nan')
    top = np.asarray(sorted_labels)[:k] > 0
    precision = np.cumsum(top) / np.arange(1, len(top) + 1)
    return float(precision[top].sum()) / min(n_relevant, k)


def _curves(sorted_labels: np.ndarray, k: int, n_relevant: int) -> Tuple[np.ndarray, np.ndarray]:
    hits = np.cumsum(np.pad(sorted_labels[:k].astype(float), (0, max(0, k - len(sorted_labels)))))
    ks = np.arange(1, k + 1)
    return hits / ks, hits / np.minimum(n_relevant, ks)


def _score_lookup(scores: ScoreSource) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if callable(scores):
        return scores
    matrix = np.asarray(scores, dtype=float)
    if matrix.ndim != 2:
        raise DataError(f"Score matrix must be 2-D, got shape {matrix.shape}")
    return lambda rows, cols: matrix[rows, cols]


def _positives_by_row(labels: Optional[LabeledObservations]) -> Dict[int, set]:
    found = defaultdict(set)
    if labels is not None:
        for m, n in zip(labels.rows[labels.positive], labels.cols[labels.positive]):
            found[int(m)].add(int(n))
    return found


def evaluate(scores: ScoreSource, test_labels: LabeledObservations,
             train_labels: Optional[LabeledObservations] = None, k: int = TOP_K,
             pool: str = 'labeled') -> RankMetrics:
    """Macro-averaged AUC, MAP@k and P@j/R@j curves over the test tasks.

    `scores` is either a dense M x N matrix or a callable mapping (rows, cols)
    to scores. Items observed as training positives of a task are removed
    from its candidate pool. With ``pool="all"`` every remaining column is a
    candidate and unlabeled items count as irrelevant.
    """
    if pool not in EVAL_POOLS:
        raise DataError(f"Unknown evaluation pool '{pool}'; choose from {EVAL_POOLS}")
    if len(test_labels) == 0:
        raise DataError("Test set is empty")
    lookup = _score_lookup(scores)
    train_pos = _positives_by_row(train_labels)

    aucs, aps, precisions, recalls = [], [], [], []
    excluded = 0
    for m, index in test_labels.task_index().items():
        blocked = train_pos.get(m, set())
        if pool == 'labeled':
            cols = test_labels.cols[index]
            relevant = test_labels.labels[index] > 0
            keep = np.array([c not in blocked for c in cols], dtype=bool)
            cols, relevant = cols[keep], relevant[keep]
        else:
            cols = np.array([c for c in range(test_labels.n_cols) if c not in blocked], dtype=np.int64)
            test_pos = set(test_labels.cols[index][test_labels.labels[index] > 0].tolist())
            relevant = np.array([c in test_pos for c in cols], dtype=bool)

        n_relevant = int(relevant.sum())
        if n_relevant == 0:
            excluded += 1
            continue
        task_scores = np.asarray(lookup(np.full(len(cols), m, dtype=np.int64), cols), dtype=float)
        ranked = sort_labels(task_scores, relevant, cols)
        p_curve, r_curve = _curves(ranked, k, n_relevant)
        precisions.append(p_curve)
        recalls.append(r_curve)
        aps.append(average_precision_at(ranked, k, n_relevant))
        task_auc = auc(task_scores, np.where(relevant, 1, -1))
        if not np.isnan(task_auc):
            aucs.append(task_auc)

    if not precisions:
        raise DataError("No test task has a relevant item outside its training positives")
    if excluded:
        logger.info("Excluded %d tasks without evaluable test positives", excluded)
    return RankMetrics(
        auc=float(np.mean(aucs)) if aucs else float('nan'),
        map100=float(np.mean(aps)),
        precision_at=np.mean(precisions, axis=0),
        recall_at=np.mean(recalls, axis=0),
        n_tasks_evaluated=len(precisions),
        n_tasks_excluded=excluded,
    )


def sample_negatives(pos_rows: Sequence[int], pos_cols: Sequence[int], n_rows: int, n_cols: int,
                     n_sets: int = N_NEGATIVE_SETS, per_set_size: Optional[int] = None,
                     seed: int = 0, allowed_rows: Optional[Sequence[int]] = None
                     ) -> List[Tuple[np.ndarray, np.ndarray]]:
    """`n_sets` uniform draws without replacement from the cells that are not positives.

    `allowed_rows` restricts the candidate cells to those rows.
    """
    flat_pos = np.unique(np.asarray(pos_rows, dtype=np.int64) * n_cols + np.asarray(pos_cols, dtype=np.int64))
    if allowed_rows is None:
        rows = np.arange(n_rows, dtype=np.int64)
    else:
        rows = np.unique(np.asarray(allowed_rows, dtype=np.int64))
    cells = (rows[:, None] * n_cols + np.arange(n_cols, dtype=np.int64)[None, :]).reshape(-1)
    free = np.setdiff1d(cells, flat_pos, assume_unique=True)
    size = len(flat_pos) if per_set_size is None else per_set_size
    if n_sets < 1:
        raise DataError(f"n_sets must be at least 1, got {n_sets}")
    if size < 1 or size > len(free):
        raise DataError(f"Cannot sample {size} negatives from {len(free)} unobserved cells")
    rng = np.random.default_rng(seed)
    sets = []
    for _ in range(n_sets):
        chosen = np.sort(rng.choice(free, size=size, replace=False))
        sets.append((chosen // n_cols, chosen % n_cols))
    return sets


def with_negatives(positives: LabeledObservations, neg_rows: np.ndarray,
                   neg_cols: np.ndarray) -> LabeledObservations:
    """Positive labels of `positives` plus the given cells labeled -1"""
    keep = positives.positive
    return LabeledObservations(
        positives.n_rows, positives.n_cols,
        np.concatenate([positives.rows[keep], neg_rows]),
        np.concatenate([positives.cols[keep], neg_cols]),
        np.concatenate([np.ones(int(keep.sum()), dtype=np.int64), -np.ones(len(neg_rows), dtype=np.int64)]),
    )


def ensemble_scores(models: Sequence[MeanModel], rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    """Mean of the bias-free predictions of every model"""
    if not models:
        raise DataError("Ensemble needs at least one model")
    return np.mean([predict(model, rows, cols, include_bias=False) for model in models], axis=0)


@dataclass(frozen=True, eq=False)
class SplitPlan:
    mode: str
    folds: Tuple[np.ndarray, ...]
    fold_of: np.ndarray
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    @property
    def fold_rows(self) -> Tuple[np.ndarray, ...]:
        if self.mode != 'rowwise':
            raise DataError("fold_rows is only defined for rowwise plans")
        return self.folds

    def train_test(self, fold: int) -> Tuple[np.ndarray, np.ndarray]:
        """Observation indices (train, test) for one fold"""
        if not 0 <= fold < self.n_folds:
            raise DataError(f"Fold {fold} out of range [0, {self.n_folds})")
        test = self.fold_of == fold
        return np.flatnonzero(~test), np.flatnonzero(test)


def make_splits(data, mode: str, seed: int, n_folds: int = N_FOLDS) -> SplitPlan:
    """Partition observations (entrywise) or their rows (rowwise) into shuffled near-equal folds.

    `data` is any observation set with a `rows` array, or the row indices themselves.
    """
    rows = getattr(data, 'rows', data)
    if mode not in SPLIT_MODES:
        raise DataError(f"Unknown split mode '{mode}'; choose from {SPLIT_MODES}")
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    rng = np.random.default_rng(seed)
    if mode == 'entrywise':
        if len(rows) < n_folds:
            raise DataError(f"Entrywise split needs at least {n_folds} observations, got {len(rows)}")
        folds = tuple(np.sort(f) for f in np.array_split(rng.permutation(len(rows)), n_folds))
        fold_of = np.empty(len(rows), dtype=np.int64)
        for i, fold in enumerate(folds):
            fold_of[fold] = i
    else:
        distinct = np.unique(rows)
        if len(distinct) < n_folds:
            raise DataError(f"Rowwise split needs at least {n_folds} observed rows, got {len(distinct)}")
        folds = tuple(np.sort(f) for f in np.array_split(rng.permutation(distinct), n_folds))
        row_fold = {int(m): i for i, fold in enumerate(folds) for m in fold}
        fold_of = np.array([row_fold[int(m)] for m in rows], dtype=np.int64)
    return SplitPlan(mode, folds, fold_of, seed)


@dataclass(frozen=True)
class GridResult:
    alpha: float
    s: float
    lam: float
    map100: float


def select_grid_point(results: Sequence[GridResult]) -> Tuple[float, float, float]:
    """(α, s, λ) with the best mean MAP@100 across folds; ties go to larger λ, then larger α"""
    if not results:
        raise DataError("No grid results to select from")
    grouped = defaultdict(list)
    for r in results:
        grouped[(r.alpha, r.s)].append(r)
    candidates = []
    for (alpha, s), group in grouped.items():
        scores = [g.map100 for g in group if not np.isnan(g.map100)]
        mean_map = float(np.mean(scores)) if scores else float('-inf')
        lam = float(np.mean([g.lam for g in group]))
        candidates.append((mean_map, lam, alpha, s))
    best = max(candidates)
    return best[2], best[3], best[1]


def select_model(results: Sequence[GridResult]) -> Tuple[float, float]:
    alpha, _, lam = select_grid_point(results)
    return alpha, lam


def aggregate(metrics: Sequence[RankMetrics]) -> Dict[str, Dict[str, float]]:
    """Mean and (population) std of AUC, MAP@100, P@100 and R@100 across folds"""
    if not metrics:
        raise DataError("No metrics to aggregate")
    columns = {
        'auc': [m.auc for m in metrics],
        'map100': [m.map100 for m in metrics],
        'p100': [m.precision_at[-1] for m in metrics],
        'r100': [m.recall_at[-1] for m in metrics],
    }
    return {name: {'mean': float(np.mean(v)), 'std': float(np.std(v))} for name, v in columns.items()}
