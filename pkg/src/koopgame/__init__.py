"""Koopman-operator solvers for two-player zero-sum differential games."""

from ._kernels import BACKEND
from .errors import KoopGameError
from .game import (
    FunctionGame,
    LinearQuadraticGame,
    Trajectory,
    TrajectoryClass,
    TurretDefenseGame,
    classify_trajectory,
    evaluate_cost,
    integrate_flow,
    saddle_point_deviation_test,
)

__version__ = "0.1.0"
