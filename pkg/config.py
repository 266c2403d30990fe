"""
Configuration management for the condot toolkit.
Solver tolerances, run locations and logging settings, overridable from the environment.
"""

import os
from typing import Dict, Any
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


class Config:
    """Global defaults shared by solvers and experiment commands."""

    # Run output
    RUNS_DIR = os.getenv('CONDOT_RUNS_DIR', 'runs')
    LOG_LEVEL = os.getenv('CONDOT_LOG_LEVEL', 'INFO')
    SHOW_PROGRESS = os.getenv('CONDOT_SHOW_PROGRESS', '1') not in ('0', 'false', 'False')
    GUARD_LEVEL = os.getenv('CONDOT_GUARD_LEVEL', 'standard')

    # Measures and exact OT
    GROUP_TOL = _env_float('CONDOT_GROUP_TOL', 1e-9)
    PLAN_TOL = _env_float('CONDOT_PLAN_TOL', 1e-10)
    WEIGHT_TOL = 1e-12
    MAX_ASSIGNMENT_SIZE = _env_int('CONDOT_MAX_ASSIGNMENT_SIZE', 1024)
    MAX_LP_VARIABLES = _env_int('CONDOT_MAX_LP_VARIABLES', 64)
    SOLVER_EXPONENTS = (1.0, 2.0)

    # Entropic OT
    SINKHORN_MAX_ITER = _env_int('CONDOT_SINKHORN_MAX_ITER', 10000)
    SINKHORN_TOL = _env_float('CONDOT_SINKHORN_TOL', 1e-9)
    SINKHORN_EPS_FACTOR = _env_float('CONDOT_SINKHORN_EPS_FACTOR', 1e-3)

    @classmethod
    def get_solver_config(cls) -> Dict[str, Any]:
        """Get solver configuration as a dictionary."""
        return {
            'group_tol': cls.GROUP_TOL,
            'plan_tol': cls.PLAN_TOL,
            'max_assignment_size': cls.MAX_ASSIGNMENT_SIZE,
            'max_lp_variables': cls.MAX_LP_VARIABLES,
            'sinkhorn_max_iter': cls.SINKHORN_MAX_ITER,
            'sinkhorn_tol': cls.SINKHORN_TOL,
            'sinkhorn_eps_factor': cls.SINKHORN_EPS_FACTOR,
        }

    @classmethod
    def validate_config(cls) -> bool:
        """Check that tolerances and limits are usable."""
        return (
            cls.GROUP_TOL >= 0
            and cls.PLAN_TOL > 0
            and cls.MAX_ASSIGNMENT_SIZE >= 1
            and cls.MAX_LP_VARIABLES >= 2
            and cls.SINKHORN_MAX_ITER >= 1
            and cls.SINKHORN_TOL > 0
            and cls.SINKHORN_EPS_FACTOR > 0
        )


# Export the solver configuration for easy access
SOLVER_CONFIG = Config.get_solver_config()
