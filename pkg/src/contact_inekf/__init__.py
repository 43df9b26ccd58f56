"""Contact-aided invariant EKF for legged-robot inertial navigation."""

from .inekf import (
    GRAVITY,
    FilterState,
    ImuBias,
    ImuSample,
    KinematicMeasurement,
    NavState,
    NoiseParams,
    RightInvariantEKF,
    initial_covariance,
    right_invariant_error,
)
from .kinematics import LegModel, UnreachableError
from .lie import GroupElement, group_exp, group_log
from .qekf import QekfState, Quaternion, QuaternionEKF
from .simulator import GaitConfig, generate, initial_sampler

__version__ = "0.1.0"

__all__ = [
    "GRAVITY",
    "FilterState",
    "GaitConfig",
    "GroupElement",
    "ImuBias",
    "ImuSample",
    "KinematicMeasurement",
    "LegModel",
    "NavState",
    "NoiseParams",
    "QekfState",
    "Quaternion",
    "QuaternionEKF",
    "RightInvariantEKF",
    "UnreachableError",
    "generate",
    "group_exp",
    "group_log",
    "initial_covariance",
    "initial_sampler",
    "right_invariant_error",
]
