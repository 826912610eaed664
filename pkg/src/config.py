import math
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Paths
REPO_ROOT = Path(__file__).resolve().parent.parent
CASES_DIR = REPO_ROOT / "cases"
DEFAULT_CASE = Path(os.getenv("DDP_CASE", str(CASES_DIR / "new_england_39.json")))
OUTPUT_DIR = Path(os.getenv("DDP_OUTPUT_DIR", str(Path("data") / "processed")))

# Grid case defaults (per-unit on BASE_MVA)
DEFAULT_BASE_MVA = 100.0
DEFAULT_NOMINAL_HZ = 60.0
DEFAULT_VOLTAGE = 1.0
LOAD_DAMPING_EPS = float(os.getenv("DDP_LOAD_DAMPING_EPS", "1e-4"))

# Phase-locked equilibrium
EQUILIBRIUM_TOL = 1e-10
EQUILIBRIUM_MAX_ITER = 50
MIN_NEWTON_STEP = 1e-8
DEFAULT_GAMMA = math.pi / 2 - 0.01
PSD_TOL = -1e-10

# Decoupling verification
DECOUPLING_TOL = 1e-9
SAMPLE_FREQ_MIN_HZ = 0.01
SAMPLE_FREQ_MAX_HZ = 100.0
SAMPLE_FREQ_COUNT = 20
RANDOM_SAMPLE_COUNT = 5
SAMPLE_SEED = 0

# Simulation
DEFAULT_DT = float(os.getenv("DDP_DT", "1e-3"))
DEFAULT_HORIZON = 60.0
SMOOTHING_STEPS = 2
STEADY_STATE_WINDOW = 10.0
STABILITY_TOL = 1e-6
NEAR_ZERO_TOL = 1e-8

# Default New England scenario: (node, amplitude p.u., start s)
DEFAULT_DISTURBANCE_NODES = (22, 44)
DEFAULT_TARGET_NODES = (40, 41)
DEFAULT_STEPS = ((44, 1.0, 0.0), (22, 0.5, 20.0))

# Output formatting
CSV_FLOAT_FORMAT = "%.17g"
