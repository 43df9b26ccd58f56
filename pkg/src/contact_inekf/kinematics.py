"""Three-joint point-foot leg: forward kinematics, Jacobian, and inverse kinematics.

The chain is hip roll -> hip pitch -> knee pitch.  The thigh hangs along
``-z`` from the hip and the shank along ``-z`` from the knee at the zero
configuration, so ``fk_position(model, 0) == hip_offset - (0, 0, L1 + L2)``.
All quantities are expressed in the body (IMU) frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from .lie import so3_exp


class UnreachableError(ValueError):
    """The requested foot position is outside the leg's workspace."""

    def __init__(self, message: str, timestamp: float | None = None):
        super().__init__(message if timestamp is None else f"{message} (t={timestamp:.6f} s)")
        self.timestamp = timestamp


@dataclass(frozen=True, eq=False)
class LegModel:
    hip_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.1, -0.2]))
    thigh: float = 0.4
    shank: float = 0.4
    joint_axes: np.ndarray = field(
        default_factory=lambda: np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    )

    def __post_init__(self):
        hip = np.asarray(self.hip_offset, dtype=float).reshape(3)
        axes = np.asarray(self.joint_axes, dtype=float).reshape(3, 3)
        if self.thigh <= 0 or self.shank <= 0:
            raise ValueError("link lengths must be positive")
        if not np.allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-12):
            raise ValueError("joint axes must be unit vectors")
        object.__setattr__(self, "hip_offset", hip)
        object.__setattr__(self, "joint_axes", axes)
        object.__setattr__(self, "standard_axes", bool(np.allclose(axes, [[1, 0, 0], [0, 1, 0], [0, 1, 0]])))

    @classmethod
    def left(cls, **kw) -> "LegModel":
        return cls(hip_offset=np.array([0.0, 0.1, -0.2]), **kw)

    @classmethod
    def right(cls, **kw) -> "LegModel":
        return cls(hip_offset=np.array([0.0, -0.1, -0.2]), **kw)


def _chain(model: LegModel, alpha):
    alpha = np.asarray(alpha, dtype=float).reshape(3)
    if not np.all(np.isfinite(alpha)):
        raise ValueError("joint angles must be finite")
    a1, a2, a3 = model.joint_axes
    R1 = so3_exp(a1 * alpha[0])
    R12 = R1 @ so3_exp(a2 * alpha[1])
    R123 = R12 @ so3_exp(a3 * alpha[2])
    knee = model.hip_offset + R12 @ np.array([0.0, 0.0, -model.thigh])
    foot = knee + R123 @ np.array([0.0, 0.0, -model.shank])
    return R1, R12, R123, knee, foot


def fk_position(model: LegModel, alpha) -> np.ndarray:
    return _chain(model, alpha)[4]


def fk_rotation(model: LegModel, alpha) -> np.ndarray:
    """Orientation of the foot (contact) frame relative to the body."""
    return _chain(model, alpha)[2]


def jacobian(model: LegModel, alpha) -> np.ndarray:
    """Linear-velocity geometric Jacobian of the foot, columns ``axis x (foot - joint)``."""
    R1, R12, _, knee, foot = _chain(model, alpha)
    a1, a2, a3 = model.joint_axes
    hip = model.hip_offset
    return np.column_stack(
        [
            np.cross(a1, foot - hip),
            np.cross(R1 @ a2, foot - hip),
            np.cross(R12 @ a3, foot - knee),
        ]
    )


def is_singular(model: LegModel, alpha, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(jacobian(model, alpha), compute_uv=False)
    return bool(s[-1] <= tol * s[0])


def inverse_kinematics(model: LegModel, foot, timestamp: float | None = None) -> np.ndarray:
    """Joint angles placing the foot at ``foot`` (body frame), knee flexion >= 0.

    Closed form for the default ``(x, y, y)`` axis layout only.
    """
    if not model.standard_axes:
        raise NotImplementedError("closed-form IK assumes joint axes (x, y, y)")
    L1, L2 = model.thigh, model.shank
    r = np.asarray(foot, dtype=float).reshape(3) - model.hip_offset
    roll = math.atan2(r[1], -r[2])
    # Foot in the rolled frame lies in its x-z plane.
    c, s = math.cos(roll), math.sin(roll)
    x = r[0]
    z = -s * r[1] + c * r[2]
    D2 = x * x + z * z
    c3 = (D2 - L1 * L1 - L2 * L2) / (2.0 * L1 * L2)
    if c3 > 1.0 + 1e-12 or c3 < -1.0 - 1e-12:
        raise UnreachableError(f"foot at distance {math.sqrt(D2):.4f} m is out of reach", timestamp)
    knee = math.acos(min(1.0, max(-1.0, c3)))
    phi = math.atan2(-x, -z)
    pitch = phi - math.atan2(L2 * math.sin(knee), L1 + L2 * math.cos(knee))
    return np.array([roll, pitch, knee])
