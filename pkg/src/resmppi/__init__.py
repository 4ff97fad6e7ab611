"""Residual-MPPI: online customization of a maximum-entropy prior policy by
sampling-based planning, with baseline planners, learned dynamics and a tabular oracle."""

__version__ = "0.1.0"

from .envs import make_env  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .planner import Planner, PlannerConfig  # noqa: E402

__all__ = ["__version__", "BACKEND", "Planner", "PlannerConfig", "make_env"]
