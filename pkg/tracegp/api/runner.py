import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config.experiment import ExperimentConfig
from ..errors import DataError, TraceGPError
from ..data import formats
from ..model import evaluation, ranking
from ..model.evaluation import GridResult, RankMetrics
from ..model.kernels import (
    KernelBasis, KernelMatrix, basis_for, exponential_kernel, normalized_laplacian,
)
from ..model.meanfit import Hyperparams, MeanModel
from ..model.ranking import LabeledObservations, RankTrainConfig, RankingState, TrainTrace

logger = logging.getLogger(__name__)


@dataclass
class GridModel:
    set_index: int
    alpha_index: int
    s_index: int
    alpha: float
    s: float
    lam: float
    model: Optional[MeanModel] = None
    state: Optional[RankingState] = None
    trace: Optional[TrainTrace] = None
    hyperparams: Optional[Hyperparams] = None
    error: Optional[str] = None

    @property
    def key(self) -> Tuple[float, float]:
        return self.alpha, self.s

    @property
    def file_name(self) -> str:
        return f"set{self.set_index:02d}_a{self.alpha_index:02d}_s{self.s_index:02d}.tgpm"


@dataclass
class GridEvaluation:
    alpha: float
    s: float
    lam: float
    n_models: int
    metrics: RankMetrics

    def summary(self) -> Dict:
        return {
            'alpha': self.alpha, 's': self.s, 'lam': self.lam, 'n_models': self.n_models,
            'auc': self.metrics.auc, 'map100': self.metrics.map100,
            'p100': float(self.metrics.precision_at[-1]), 'r100': float(self.metrics.recall_at[-1]),
        }


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 32))


class ExperimentRunner:
    """Kernel loading, grid training over negative sets, evaluation and cross-validation"""

    def __init__(self, config: ExperimentConfig):
        self.config = config

    def _kernel(self, graph_path: Optional[str], kernel_path: Optional[str], n: int,
                side: str) -> Optional[KernelMatrix]:
        if graph_path:
            graph = formats.read_graph(graph_path)
            kernel = exponential_kernel(normalized_laplacian(graph), self.config.add_identity)
        elif kernel_path:
            kernel = KernelMatrix(formats.read_matrix(kernel_path))
        else:
            logger.info("No %s graph or kernel configured; using the identity covariance", side)
            return None
        if kernel.dim != n:
            raise DataError(f"The {side} kernel covers {kernel.dim} nodes but the labels have {n} {side}s")
        return kernel

    def bases(self, n_rows: int, n_cols: int) -> Tuple[KernelBasis, KernelBasis]:
        cfg = self.config
        k_m = self._kernel(cfg.row_graph, cfg.row_kernel, n_rows, 'row')
        k_n = self._kernel(cfg.col_graph, cfg.col_kernel, n_cols, 'column')
        return basis_for(k_m, n_rows, cfg.eig_floor), basis_for(k_n, n_cols, cfg.eig_floor)

    def rank_config(self) -> RankTrainConfig:
        cfg = self.config
        h = Hyperparams(lam=0.0, sigma2=cfg.sigma2, max_iter=cfg.fit_max_iter, tol=cfg.fit_tol,
                        use_row_bias=cfg.use_row_bias)
        return RankTrainConfig(h, cfg.outer_max_iter, cfg.outer_tol, cfg.inner_max_iter,
                               cfg.inner_tol, cfg.inner_solver, workers=1)

    def subsample_positives(self, labels: LabeledObservations, seed: int) -> LabeledObservations:
        """Keep a random fraction of the positive associations; negatives are untouched"""
        fraction = self.config.subsample
        if fraction is None or fraction >= 1.0:
            return labels
        rng = np.random.default_rng(seed)
        positives = np.flatnonzero(labels.positive)
        kept = rng.choice(positives, size=max(1, int(round(fraction * len(positives)))), replace=False)
        keep = np.sort(np.concatenate([kept, np.flatnonzero(~labels.positive)]))
        logger.info("Subsampled %d of %d positive associations", len(kept), len(positives))
        return labels.subset(keep)

    def training_sets(self, labels: LabeledObservations, rng: np.random.Generator) -> List[LabeledObservations]:
        cfg = self.config
        labels = self.subsample_positives(labels, child_seed(rng))
        negatives_seed = child_seed(rng)
        if cfg.n_negative_sets == 0:
            return [labels]
        pos = labels.positive
        if not pos.any():
            raise DataError("Training labels contain no positive associations")
        sets = evaluation.sample_negatives(labels.rows[pos], labels.cols[pos], labels.n_rows, labels.n_cols,
                                           cfg.n_negative_sets, cfg.negatives_per_set, negatives_seed,
                                           allowed_rows=labels.rows)
        return [evaluation.with_negatives(labels, rows, cols) for rows, cols in sets]

    def _train_set(self, set_index: int, labels: LabeledObservations, g_m: KernelBasis,
                   g_n: KernelBasis) -> List[GridModel]:
        cfg = self.config
        base = self.rank_config()
        s_grid = cfg.s_grid()
        lam_max = ranking.ranking_lambda_max(labels, g_m, g_n, cfg.use_row_bias)
        logger.debug("Set %d: lambda_max %.6e", set_index, lam_max)
        results = []
        for ai, alpha in enumerate(cfg.alphas):
            previous: Optional[GridModel] = None
            for si, s in enumerate(s_grid):
                lam = s * lam_max
                point = GridModel(set_index, ai, si, alpha, s, lam)
                try:
                    h = replace(base.hyperparams, lam=lam, alpha=alpha)
                    model, state, trace = ranking.train(
                        labels, g_m, g_n, replace(base, hyperparams=h),
                        init_model=previous.model if previous else None,
                        init_state=previous.state if previous else None,
                    )
                    point.model, point.state, point.trace = model, state, trace
                    point.hyperparams = h
                    previous = point
                except TraceGPError as e:
                    logger.warning("Set %d, alpha=%g, s=%g failed: %s", set_index, alpha, s, e)
                    point.error = str(e)
                results.append(point)
        return results

    def train_grid(self, labels: LabeledObservations, g_m: KernelBasis, g_n: KernelBasis,
                   rng: np.random.Generator) -> List[GridModel]:
        """One warm-started path per (negative set, α); sets run in parallel, results in set order"""
        sets = self.training_sets(labels, rng)
        with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
            per_set = list(pool.map(lambda item: self._train_set(item[0], item[1], g_m, g_n), enumerate(sets)))
        failed = [i for i, points in enumerate(per_set) if all(p.error for p in points)]
        if len(failed) == len(per_set):
            raise TraceGPError(f"Training failed for all {len(per_set)} negative sets")
        for i in failed:
            logger.warning("Negative set %d failed at every grid point", i)
        return [point for points in per_set for point in points]

    @staticmethod
    def group(models: Sequence[GridModel]) -> Dict[Tuple[float, float], List[GridModel]]:
        groups: Dict[Tuple[float, float], List[GridModel]] = {}
        for point in models:
            groups.setdefault(point.key, []).append(point)
        return groups

    def evaluate_grid(self, models: Sequence[GridModel], test_labels: LabeledObservations,
                      train_labels: Optional[LabeledObservations]) -> List[GridEvaluation]:
        results = []
        for (alpha, s), group in self.group(models).items():
            fitted = [p.model for p in group if p.model is not None]
            if not fitted:
                logger.warning("No model trained for alpha=%g, s=%g; skipping", alpha, s)
                continue
            metrics = evaluation.evaluate(
                lambda rows, cols: evaluation.ensemble_scores(fitted, rows, cols),
                test_labels, train_labels, k=self.config.top_k, pool=self.config.pool,
            )
            lam = float(np.mean([p.lam for p in group]))
            results.append(GridEvaluation(alpha, s, lam, len(fitted), metrics))
        return results

    def cross_validate(self, labels: LabeledObservations, g_m: KernelBasis, g_n: KernelBasis,
                       rng: np.random.Generator) -> Dict:
        cfg = self.config
        plan = evaluation.make_splits(labels, cfg.mode, child_seed(rng), cfg.n_folds)
        per_fold: List[List[GridEvaluation]] = []
        fold_blocks = []
        for fold in range(plan.n_folds):
            train_idx, test_idx = plan.train_test(fold)
            train, test = labels.subset(train_idx), labels.subset(test_idx)
            fold_seed = child_seed(rng)
            try:
                models = self.train_grid(train, g_m, g_n, np.random.default_rng(fold_seed))
                evaluations = self.evaluate_grid(models, test, train)
            except TraceGPError as e:
                raise type(e)(f"Fold {fold} failed: {e}") from e
            if not evaluations:
                raise TraceGPError(f"Fold {fold} failed: no grid point could be evaluated")
            logger.info("Fold %d: %d train / %d test observations", fold, len(train_idx), len(test_idx))
            per_fold.append(evaluations)
            fold_blocks.append({
                'fold': fold,
                'n_train': int(len(train_idx)),
                'n_test': int(len(test_idx)),
                'grid': [ev.summary() for ev in evaluations],
            })

        results = [GridResult(ev.alpha, ev.s, ev.lam, ev.metrics.map100)
                   for evaluations in per_fold for ev in evaluations]
        alpha, s, lam = evaluation.select_grid_point(results)
        chosen = []
        for fold, evaluations in enumerate(per_fold):
            match = [ev for ev in evaluations if (ev.alpha, ev.s) == (alpha, s)]
            if not match:
                raise TraceGPError(f"Fold {fold} has no result for the selected alpha={alpha:g}, s={s:g}")
            chosen.append(match[0].metrics)
            fold_blocks[fold]['selected'] = match[0].metrics.to_dict()

        return {
            'mode': cfg.mode,
            'folds': fold_blocks,
            'selected': {'alpha': alpha, 's': s, 'lam': lam},
            'aggregate': evaluation.aggregate(chosen),
            'curves': {
                'precision_at': [float(v) for v in np.mean([m.precision_at for m in chosen], axis=0)],
                'recall_at': [float(v) for v in np.mean([m.recall_at for m in chosen], axis=0)],
            },
        }

    @staticmethod
    def save_grid(models: Sequence[GridModel], out_dir: Path, models_dir: str) -> List[Dict]:
        """Persist every fitted grid model; returns the manifest entries"""
        entries = []
        for point in models:
            entry = {'set': point.set_index, 'alpha': point.alpha, 's': point.s, 'lam': point.lam}
            if point.model is None:
                entry['error'] = point.error
            else:
                relative = f"{models_dir}/{point.file_name}"
                formats.save_model(out_dir / relative, point.model, point.hyperparams,
                                   report=point.trace.to_dict(), state=point.state,
                                   meta={'set': point.set_index, 's': point.s})
                entry.update({
                    'file': relative,
                    'objective': point.trace.objective[-1],
                    'converged': point.trace.converged,
                    'iterations': point.trace.iterations,
                })
            entries.append(entry)
        return entries

    @staticmethod
    def load_grid(manifest_path: Path, n_rows: int, n_cols: int) -> List[GridModel]:
        """Models listed in a manifest, checked against their entries and the label dimensions"""
        manifest = formats.read_json(manifest_path, 'manifest')
        if not isinstance(manifest, dict) or 'models' not in manifest:
            raise DataError(f"Error reading manifest {manifest_path}: no 'models' list")
        base = manifest_path.parent
        models = []
        for entry in manifest['models']:
            if 'file' not in entry:
                continue
            saved = formats.load_model(base / entry['file'])
            h = saved.hyperparams
            if not (np.isclose(h.lam, entry['lam']) and np.isclose(h.alpha, entry['alpha'])):
                raise DataError(f"Model {entry['file']} does not match its manifest entry "
                                f"(alpha={entry['alpha']}, lam={entry['lam']})")
            if saved.model.shape != (n_rows, n_cols):
                raise DataError(f"Model {entry['file']} covers {saved.model.shape[0]}x{saved.model.shape[1]} "
                                f"but the labels are {n_rows}x{n_cols}")
            models.append(GridModel(entry['set'], 0, 0, entry['alpha'], entry['s'], entry['lam'],
                                    model=saved.model))
        if not models:
            raise DataError(f"Manifest {manifest_path} lists no trained models")
        return models
