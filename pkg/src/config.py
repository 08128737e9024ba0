"""
Runtime configuration for the plpgrid simulator.
"""

from __future__ import annotations

import os
from pathlib import Path


BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = BASE_DIR / "data"
SCENARIO_PATH = Path(os.environ.get("PLPGRID_SCENARIO", DATA_DIR / "desk_scenario.json"))
OUTPUT_DIR = Path(os.environ.get("PLPGRID_OUTPUT_DIR", BASE_DIR / "runs"))

KKT_TOLERANCE = float(os.environ.get("PLPGRID_KKT_TOLERANCE", "1e-6"))
BALANCE_TOLERANCE = float(os.environ.get("PLPGRID_BALANCE_TOLERANCE", "1e-9"))
PRICE_TOLERANCE = float(os.environ.get("PLPGRID_PRICE_TOLERANCE", "0.01"))
MAX_ITERS = int(os.environ.get("PLPGRID_MAX_ITERS", "10"))
SEED = int(os.environ.get("PLPGRID_SEED", "7"))

# Exhaustive subset search above this many switch candidates falls back to greedy.
EXHAUSTIVE_LIMIT = int(os.environ.get("PLPGRID_EXHAUSTIVE_LIMIT", "13"))

SOLVER_METHOD = os.environ.get("PLPGRID_SOLVER_METHOD", "highs-ds")
SOLVER_TOLERANCE = float(os.environ.get("PLPGRID_SOLVER_TOLERANCE", "1e-10"))

LOG_LEVEL = os.environ.get("PLPGRID_LOG_LEVEL", "INFO")

CODE_VERSION = "1.0.0"
HOURS_PER_YEAR = 8760.0
