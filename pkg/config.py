"""Configuration management for gridflex."""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

APP_NAME = "gridflex"
APP_VERSION = "0.1.0"

# Logging
LOG_LEVEL = os.getenv("GRIDFLEX_LOG_LEVEL", "INFO").upper()

# Default directory for reports and polygons
OUTPUT_DIR = Path(os.getenv("GRIDFLEX_OUTPUT_DIR", "./out"))

# Conic solver (any cvxpy solver name supporting SOC constraints)
SOLVER = os.getenv("GRIDFLEX_SOLVER", "CLARABEL")
TOL_FEAS = float(os.getenv("GRIDFLEX_TOL_FEAS", "1e-8"))
TOL_GAP = float(os.getenv("GRIDFLEX_TOL_GAP", "1e-8"))

# Backward/forward sweep
BFS_TOL = float(os.getenv("GRIDFLEX_BFS_TOL", "1e-8"))
BFS_MAX_ITER = int(os.getenv("GRIDFLEX_BFS_MAX_ITER", "100"))

# Finite-difference step and regression defaults for sensitivities
FD_STEP = float(os.getenv("GRIDFLEX_FD_STEP", "1e-5"))
RIDGE = float(os.getenv("GRIDFLEX_RIDGE", "1e-6"))
FIT_DEGREE = int(os.getenv("GRIDFLEX_FIT_DEGREE", "3"))

# Cost accounting
VIOLATION_RATE_CHF = float(os.getenv("GRIDFLEX_VIOLATION_RATE_CHF", "100"))

# Template paths
TEMPLATES_DIR = Path(__file__).parent / "templates"

# Report schema
REPORT_SCHEMA_VERSION = 1
