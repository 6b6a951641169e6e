"""Utilities Constants
- Centralized numeric floors and defaults used by services and tests.
"""

# Artifacts
OUTPUT_DIR = "runs"                       # relative to cwd when no override
OUTPUT_ROOT_ENV = "FCCL_SIM_OUTPUT_ROOT"  # env override for the output root

# Numerics
LOG_FLOOR = 1e-12      # clamp for log arguments in CE/KL
BN_EPS = 1e-5
BN_MOMENTUM = 0.1      # EMA weight of the newest batch statistics

# Logging
MEMORY_LOG_CAP = 2000  # events kept in memory when no run is bound

# Default seeds (class-order shuffles)
DEFAULT_SEEDS = (2021, 2022, 2023)
