from pathlib import Path

# Environment
THREADS_ENV = 'TRACEGP_THREADS'
SEED_ENV = 'TRACEGP_SEED'
DEFAULT_THREADS = 1
ENV_FILE = Path('.env')

# Kernels
EIG_FLOOR = 1e-10
PSD_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-10

# Mean fit
FIT_TOL = 1e-6
FIT_MAX_ITER = 2000
RANK_TOLERANCE = 1e-8
RIDGE_EXACT_MAX = 2000
S_GRID_COUNT = 30
S_GRID_LOW = 1e-3
S_GRID_HIGH = 1.0
ALPHA_GRID = (1.0, 0.8, 0.6, 0.4, 0.0)

# Posterior
JITTER_START = 1e-12
JITTER_MAX = 1e-6
FACTOR_RESTARTS = 5
FACTOR_JITTER = 1e-10

# Ranking
OUTER_TOL = 1e-6
OUTER_MAX_ITER = 100
INNER_TOL = 1e-8
INNER_MAX_ITER = 5000
INNER_SOLVERS = ('eg', 'projected', 'isotonic')

# Evaluation
TOP_K = 100
N_FOLDS = 5
N_NEGATIVE_SETS = 10
SPLIT_MODES = ('entrywise', 'rowwise')
EVAL_POOLS = ('labeled', 'all')

# File formats
MATRIX_MAGIC = b'KRNL'
MATRIX_VERSION = 1
CONTAINER_MAGIC = b'TGPM'
CONTAINER_VERSION = 1
KERNEL_FILE = 'kernel.krnl'
BASIS_FILE = 'basis.krnl'
MANIFEST_FILE = 'manifest.json'
REPORTS_FILE = 'reports.json'
METRICS_FILE = 'metrics.json'
CV_FILE = 'cv.json'
CURVES_FILE = 'curves.tsv'
MODELS_DIR = 'models'
ROW_KERNEL_FILE = 'row_kernel.krnl'
COLUMN_KERNEL_FILE = 'column_kernel.krnl'
Z_FILE = 'z.krnl'
LABELS_FILE = 'labels.tsv'
MANIFEST_VERSION = 1
