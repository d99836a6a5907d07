"""
Configuration constants for the noise covariance estimation toolkit
"""
from pathlib import Path

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = PROJECT_ROOT / "data"
CONFIG_DIR = DATA_DIR / "configs"
RESULTS_DIR = DATA_DIR / "results"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "default.json"

# Parameterization
THETA_CLAMP = 20.0
PARAM_KINDS = ["isotropic", "diagonal", "cholesky"]
PROCESS_KINDS = ["fixed", "isotropic", "diagonal"]

# Filter numerics
SUPERVISORY_JITTER = 1e-10

# Oracle
ORACLE_MAX_DIM = 512
FD_STEP = 1e-5
FD_SWEEP_STEPS = (1e-4, 1e-5, 1e-6)

# Optimizer
ETA0 = 0.1
ITERMAX = 20
GRAD_TOL = 1e-8
ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
MAX_BACKTRACKS = 30

# Gradcheck thresholds (forward-vs-reverse, analytic-vs-FD, filter-vs-oracle)
MODE_TOLERANCE = 1e-8
FD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-8
# Absolute floor of the analytic-vs-FD relative error
FD_FLOOR = 1e-6
GRADCHECK_STEPS = 20

# Simulation defaults (constant-velocity experiment)
N_CALIB = 100
N_TEST = 600
DT = 1.0
PROCESS_Q = 0.01
SUPERVISORY_ALPHA = 0.01
R_BASE_DIAG = 0.36
R_BASE_OFFDIAG = 0.18
R_D_DIAG = [0.9**2, 1.3**2, 2.2**2]
DOWNSAMPLE = 5
DISTANCE_THRESHOLD = 3.0
SPARSE_DOWNSAMPLE = 8
SPARSE_THRESHOLD = 2.5
TRIALS = 100

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK = 4

# Output file names
CALIB_FILE = "calibration.csv"
TEST_FILE = "test.csv"
SUPERVISORY_FILE = "supervisory.json"
SUPERVISORY_SPARSE_FILE = "supervisory_sparse.json"
REPORT_FILE = "calibration_report.json"
LOSS_HISTORY_FILE = "loss_history.csv"
DATASET_META_FILE = "dataset_meta.json"
GRADCHECK_FILE = "gradcheck.json"
MONTE_CARLO_FILE = "monte_carlo_summary.csv"
MONTE_CARLO_TRIALS_FILE = "monte_carlo_trials.csv"
BENCH_FILE = "bench_modes.csv"
EVALUATION_FILE = "evaluation.json"
FILTER_STEPS_FILE = "filter_steps.csv"
LOSS_BREAKDOWN_FILE = "loss_breakdown.json"
