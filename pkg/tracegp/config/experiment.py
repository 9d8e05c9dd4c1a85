import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from ..errors import ConfigError
from ..model.meanfit import default_s_grid
from .settings import (
    ALPHA_GRID, DEFAULT_THREADS, EIG_FLOOR, ENV_FILE, EVAL_POOLS, FIT_MAX_ITER, FIT_TOL,
    INNER_MAX_ITER, INNER_SOLVERS, INNER_TOL, N_FOLDS, N_NEGATIVE_SETS, OUTER_MAX_ITER,
    OUTER_TOL, S_GRID_COUNT, S_GRID_HIGH, S_GRID_LOW, SEED_ENV, SPLIT_MODES, THREADS_ENV, TOP_K,
)

logger = logging.getLogger(__name__)

_PATH_KEYS = ('row_graph', 'col_graph', 'row_kernel', 'col_kernel', 'labels', 'test_labels',
              'manifest', 'scores', 'output_dir')


@dataclass
class ExperimentConfig:
    # inputs
    row_graph: Optional[str] = None
    col_graph: Optional[str] = None
    row_kernel: Optional[str] = None
    col_kernel: Optional[str] = None
    labels: Optional[str] = None
    test_labels: Optional[str] = None
    manifest: Optional[str] = None
    scores: Optional[str] = None
    output_dir: str = 'out'

    # kernels
    add_identity: bool = False
    eig_floor: float = EIG_FLOOR

    # hyperparameter grid
    alphas: List[float] = field(default_factory=lambda: list(ALPHA_GRID))
    s_count: int = S_GRID_COUNT
    s_low: float = S_GRID_LOW
    s_high: float = S_GRID_HIGH
    sigma2: float = 1.0
    use_row_bias: bool = False
    fit_max_iter: int = FIT_MAX_ITER
    fit_tol: float = FIT_TOL

    # trainer
    outer_max_iter: int = OUTER_MAX_ITER
    outer_tol: float = OUTER_TOL
    inner_max_iter: int = INNER_MAX_ITER
    inner_tol: float = INNER_TOL
    inner_solver: str = 'eg'

    # evaluation
    mode: str = 'entrywise'
    n_folds: int = N_FOLDS
    n_negative_sets: int = N_NEGATIVE_SETS
    negatives_per_set: Optional[int] = None
    pool: str = 'labeled'
    top_k: int = TOP_K
    subsample: Optional[float] = None
    alpha: Optional[float] = None
    s: Optional[float] = None

    # synthetic data
    synth_rows: int = 200
    synth_cols: int = 300
    synth_rank: Optional[int] = 3
    length_scale: float = 0.2
    positives_per_row: int = 10
    label_noise: float = 0.0

    seed: Optional[int] = None
    threads: int = DEFAULT_THREADS

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> 'ExperimentConfig':
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if base_dir is not None:
            for key in _PATH_KEYS:
                if data.get(key) is not None and not Path(data[key]).is_absolute():
                    data[key] = str(base_dir / data[key])
        return cls(**data)

    @classmethod
    def load(cls, path: Optional[str]) -> 'ExperimentConfig':
        """Config from a JSON file (paths resolve against its directory), or defaults"""
        if path is None:
            return cls()
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file {path} does not exist")
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error reading config file {path}: line {e.lineno}: {e.msg}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        return cls.from_dict(data, config_path.parent)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, overrides: Dict[str, Any]) -> 'ExperimentConfig':
        """Flags win over config keys; None means 'not given'"""
        given = {k: v for k, v in overrides.items() if v is not None}
        unknown = sorted(set(given) - set(self.keys()))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        return replace(self, **given)

    def with_environment(self, env_file: Path = ENV_FILE) -> 'ExperimentConfig':
        """Fill threads and a missing seed from TRACEGP_THREADS / TRACEGP_SEED (.env honored)"""
        if env_file.exists():
            load_dotenv(env_file)
        updates = {}
        threads = os.getenv(THREADS_ENV)
        if threads:
            updates['threads'] = _parse_int(threads, THREADS_ENV)
        seed = os.getenv(SEED_ENV)
        if seed and self.seed is None:
            updates['seed'] = _parse_int(seed, SEED_ENV)
        return replace(self, **updates)

    def s_grid(self) -> List[float]:
        return default_s_grid(self.s_count, self.s_low, self.s_high)

    def validate(self, required: Sequence[str] = (), need_seed: bool = False) -> 'ExperimentConfig':
        for key in required:
            if getattr(self, key) is None:
                raise ConfigError(f"Missing required setting '{key}' (config key or --{key.replace('_', '-')})")
        for key in _PATH_KEYS:
            value = getattr(self, key)
            if key != 'output_dir' and value is not None and not Path(value).exists():
                raise ConfigError(f"File for '{key}' not found: {value}")
        if self.row_graph and self.row_kernel:
            raise ConfigError("Give either row_graph or row_kernel, not both")
        if self.col_graph and self.col_kernel:
            raise ConfigError("Give either col_graph or col_kernel, not both")
        if need_seed and self.seed is None:
            raise ConfigError(f"A seed is required: set 'seed', pass --seed or export {SEED_ENV}")
        if not self.alphas or any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("alphas must be a nonempty list of values in [0, 1]")
        if self.s_count < 1 or not 0 < self.s_low <= self.s_high <= 1.0:
            raise ConfigError("s grid needs s_count >= 1 and 0 < s_low <= s_high <= 1")
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"mode must be one of {SPLIT_MODES}, got '{self.mode}'")
        if self.pool not in EVAL_POOLS:
            raise ConfigError(f"pool must be one of {EVAL_POOLS}, got '{self.pool}'")
        if self.inner_solver not in INNER_SOLVERS:
            raise ConfigError(f"inner_solver must be one of {INNER_SOLVERS}, got '{self.inner_solver}'")
        if self.n_negative_sets < 0 or self.n_folds < 2 or self.threads < 1 or self.top_k < 1:
            raise ConfigError("n_negative_sets >= 0, n_folds >= 2, threads >= 1 and top_k >= 1 are required")
        if self.subsample is not None and not 0 < self.subsample <= 1:
            raise ConfigError(f"subsample must lie in (0, 1], got {self.subsample}")
        if not self.sigma2 > 0 or not self.eig_floor > 0:
            raise ConfigError("sigma2 and eig_floor must be positive")
        return self


def _parse_int(value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got '{value}'")
