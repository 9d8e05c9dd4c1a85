import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from ..api.runner import ExperimentRunner, GridEvaluation, child_seed
from ..config.experiment import ExperimentConfig
from ..config.settings import (
    BASIS_FILE, COLUMN_KERNEL_FILE, CURVES_FILE, CV_FILE, KERNEL_FILE, LABELS_FILE, MANIFEST_FILE,
    MANIFEST_VERSION, METRICS_FILE, MODELS_DIR, REPORTS_FILE, ROW_KERNEL_FILE, Z_FILE,
)
from ..data import formats
from ..errors import ConfigError, DataError
from ..model import evaluation
from ..model.evaluation import GridResult
from ..model.kernels import (
    exponential_kernel, kernel_basis, normalized_laplacian, spectrum_summary,
    squared_exponential_kernel, truncate_rank,
)
from ..model.posterior import sample_prior
from ..model.ranking import sample_labels
from .ui import UI

logger = logging.getLogger(__name__)

_HEADLINE = ('auc', 'map100', 'p100', 'r100')


class Commands:
    @staticmethod
    def show_config(config: ExperimentConfig) -> None:
        """Handle cfg command"""
        UI.display_config(config.to_dict())

    @staticmethod
    def build_kernel(config: ExperimentConfig) -> None:
        """Handle kernel command: graph -> exp(-L) (+ I) -> basis"""
        config.validate(required=('row_graph',))
        out = Path(config.output_dir)
        with UI.progress_context("Building kernel...") as progress:
            task = progress.add_task("Eigendecomposing the Laplacian...", total=None)
            graph = formats.read_graph(config.row_graph)
            kernel = exponential_kernel(normalized_laplacian(graph), config.add_identity)
            basis = kernel_basis(kernel, config.eig_floor)
            progress.remove_task(task)

        formats.write_matrix(out / KERNEL_FILE, kernel.entries)
        formats.write_matrix(out / BASIS_FILE, basis.entries)
        UI.display_spectrum(spectrum_summary(kernel, config.eig_floor))
        UI.print_success(f"Wrote {out / KERNEL_FILE} and {out / BASIS_FILE} (basis rank {basis.dim})")

    @staticmethod
    def train(config: ExperimentConfig) -> None:
        """Handle train command: one warm-started grid per sampled negative set"""
        config.validate(required=('labels',), need_seed=True)
        labels = formats.read_labels(config.labels)
        runner = ExperimentRunner(config)
        g_m, g_n = runner.bases(labels.n_rows, labels.n_cols)
        rng = np.random.default_rng(config.seed)

        with UI.progress_context("Training...") as progress:
            task = progress.add_task(f"Training {len(config.alphas)} x {config.s_count} grid...", total=None)
            models = runner.train_grid(labels, g_m, g_n, rng)
            progress.remove_task(task)

        out = Path(config.output_dir)
        entries = runner.save_grid(models, out, MODELS_DIR)
        manifest = {
            'version': MANIFEST_VERSION,
            'dims': [labels.n_rows, labels.n_cols],
            'seed': config.seed,
            'config': config.to_dict(),
            'models': entries,
        }
        if config.alpha is not None and config.s is not None:
            manifest['selected'] = {'alpha': config.alpha, 's': config.s}
        formats.write_json(out / MANIFEST_FILE, manifest)

        reports = []
        for point in models:
            report = {'set': point.set_index, 'alpha': point.alpha, 's': point.s, 'lam': point.lam}
            if point.trace is None:
                report['error'] = point.error
            else:
                logger.debug("set %d alpha=%g s=%g objective trace: %s", point.set_index, point.alpha,
                             point.s, point.trace.objective)
                report['trace'] = point.trace.to_dict()
                report['fits'] = [{k: v for k, v in r.to_dict().items() if k != 'objective_trace'}
                                  for r in point.trace.fit_reports]
            reports.append(report)
        formats.write_json(out / REPORTS_FILE, reports)

        trained = sum(1 for p in models if p.model is not None)
        if trained < len(models):
            UI.print_warning(f"{len(models) - trained} of {len(models)} grid points failed; see {REPORTS_FILE}")
        UI.print_success(f"Trained {trained} models; manifest written to {out / MANIFEST_FILE}")

    @staticmethod
    def evaluate(config: ExperimentConfig) -> None:
        """Handle evaluate command: ensemble (or injected) scores -> metrics JSON + curves"""
        config.validate(required=('test_labels',))
        if not config.manifest and not config.scores:
            raise ConfigError("evaluate needs --manifest or --scores")
        test = formats.read_labels(config.test_labels)
        train = formats.read_labels(config.labels) if config.labels else None
        out = Path(config.output_dir)

        if config.scores:
            matrix = formats.read_matrix(config.scores)
            if matrix.shape != (test.n_rows, test.n_cols):
                raise DataError(f"Score matrix is {matrix.shape[0]}x{matrix.shape[1]} "
                                f"but the labels are {test.n_rows}x{test.n_cols}")
            best = evaluation.evaluate(matrix, test, train, k=config.top_k, pool=config.pool)
            results = [{'source': str(config.scores), 'metrics': best.to_dict()}]
            selected = {'source': str(config.scores)}
            rows = [{k: best.to_dict()[k] for k in _HEADLINE}]
        else:
            runner = ExperimentRunner(config)
            grid = runner.load_grid(Path(config.manifest), test.n_rows, test.n_cols)
            if config.alpha is not None and config.s is not None:
                grid = [p for p in grid if np.isclose(p.alpha, config.alpha) and np.isclose(p.s, config.s)]
                if not grid:
                    raise DataError(f"Manifest has no models for alpha={config.alpha:g}, s={config.s:g}")
            evaluations = runner.evaluate_grid(grid, test, train)
            if not evaluations:
                raise DataError("No grid point could be evaluated")
            alpha, s, _ = evaluation.select_grid_point(
                [GridResult(ev.alpha, ev.s, ev.lam, ev.metrics.map100) for ev in evaluations])
            chosen: GridEvaluation = next(ev for ev in evaluations if (ev.alpha, ev.s) == (alpha, s))
            best = chosen.metrics
            results = [{'alpha': ev.alpha, 's': ev.s, 'lam': ev.lam, 'n_models': ev.n_models,
                        'metrics': ev.metrics.to_dict()} for ev in evaluations]
            selected = {'alpha': chosen.alpha, 's': chosen.s, 'lam': chosen.lam}
            rows = [ev.summary() for ev in evaluations]

        formats.write_json(out / METRICS_FILE, {
            'pool': config.pool,
            'top_k': config.top_k,
            'results': results,
            'selected': selected,
        })
        formats.write_curves(out / CURVES_FILE, best.precision_at, best.recall_at)
        UI.display_metrics(rows, "Test Metrics")
        if best.n_tasks_excluded:
            UI.print_info(f"{best.n_tasks_excluded} tasks had no evaluable test positive and were excluded")
        UI.print_success(f"Wrote {out / METRICS_FILE} and {out / CURVES_FILE}")

    @staticmethod
    def cross_validate(config: ExperimentConfig) -> None:
        """Handle cv command"""
        config.validate(required=('labels',), need_seed=True)
        labels = formats.read_labels(config.labels)
        runner = ExperimentRunner(config)
        g_m, g_n = runner.bases(labels.n_rows, labels.n_cols)
        rng = np.random.default_rng(config.seed)

        with UI.progress_context("Cross-validating...") as progress:
            task = progress.add_task(f"{config.n_folds}-fold {config.mode} cross-validation...", total=None)
            result = runner.cross_validate(labels, g_m, g_n, rng)
            progress.remove_task(task)

        out = Path(config.output_dir)
        curves = result.pop('curves')
        result['seed'] = config.seed
        result['config'] = config.to_dict()
        formats.write_json(out / CV_FILE, result)
        formats.write_curves(out / CURVES_FILE, curves['precision_at'], curves['recall_at'])

        rows: List[Dict] = [dict({'fold': block['fold']}, **{k: block['selected'][k] for k in _HEADLINE})
                            for block in result['folds']]
        UI.display_metrics(rows, "Folds at the selected grid point")
        UI.display_aggregate(result['aggregate'], result['selected'])
        UI.print_success(f"Wrote {out / CV_FILE} and {out / CURVES_FILE}")

    @staticmethod
    def synth(config: ExperimentConfig) -> None:
        """Handle synth command: Z from the Kronecker GP prior, labels from its top entries per row"""
        config.validate(need_seed=True)
        rng = np.random.default_rng(config.seed)
        kernels = []
        for n in (config.synth_rows, config.synth_cols):
            kernel = squared_exponential_kernel(np.linspace(0.0, 1.0, n), config.length_scale)
            kernels.append(truncate_rank(kernel, config.synth_rank) if config.synth_rank else kernel)
        k_m, k_n = kernels
        z = sample_prior(k_m, k_n, child_seed(rng), config.eig_floor)
        labels = sample_labels(z, config.positives_per_row, child_seed(rng), config.label_noise)

        out = Path(config.output_dir)
        formats.write_matrix(out / ROW_KERNEL_FILE, k_m.entries)
        formats.write_matrix(out / COLUMN_KERNEL_FILE, k_n.entries)
        formats.write_matrix(out / Z_FILE, z)
        formats.write_labels(out / LABELS_FILE, labels, comments=[
            'tgp synth',
            f'seed={config.seed}',
            f'rows={config.synth_rows} cols={config.synth_cols} rank={config.synth_rank} '
            f'length_scale={config.length_scale}',
            f'positives_per_row={config.positives_per_row} label_noise={config.label_noise}',
        ])
        UI.print_success(f"Wrote {len(labels)} labels for a {config.synth_rows}x{config.synth_cols} "
                         f"problem to {out}")
