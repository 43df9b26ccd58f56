"""SO(3) and SE_K(3) group operations.

An element of SE_K(3) is a rotation together with K translation-like
columns (for the contact filter: velocity, position, then one column per
contact point).  Tangent vectors are ordered ``(xi_R, xi_col1, ..., xi_colK)``
and have dimension ``3 * (K + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this angle the trigonometric coefficients switch to Taylor series.
SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Return the 3x3 matrix ``S`` with ``S @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(w) -> np.ndarray:
    x, y, z = (float(c) for c in np.asarray(w, dtype=float).reshape(3))
    theta2 = x * x + y * y + z * z
    theta = math.sqrt(theta2)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    # I + a W + b W^2, written out
    return np.array([
        [1.0 - b * (y * y + z * z), b * x * y - a * z, b * x * z + a * y],
        [b * x * y + a * z, 1.0 - b * (x * x + z * z), b * y * z - a * x],
        [b * x * z - a * y, b * y * z + a * x, 1.0 - b * (x * x + y * y)],
    ])


def so3_log(R) -> np.ndarray:
    """Principal rotation vector of ``R`` (norm at most pi).

    At exactly pi the axis is ambiguous up to sign; the axis whose first
    nonzero component is positive is returned.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    axial = unskew(R - R.T) / 2.0  # sin(theta) * axis
    s = np.linalg.norm(axial)
    if cos_theta > 0.0 and s < SMALL_ANGLE:
        return axial * (1.0 + s * s / 6.0)
    if cos_theta > 0.0 or s > 1e-4:
        return axial * (np.arctan2(s, cos_theta) / s)

    # Near pi: recover the axis from the symmetric part, aaT = (Rs - cI)/(1-c).
    B = ((R + R.T) / 2.0 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(B[i, i])
    axis /= np.linalg.norm(axis)
    if s < 1e-10:
        nz = axis[np.abs(axis) > 1e-12]
        if nz[0] < 0.0:
            axis = -axis
    elif axis @ axial < 0.0:
        axis = -axis
    return axis * np.arctan2(abs(axis @ axial), cos_theta)


def so3_left_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(3)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    W = skew(w)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - math.cos(theta)) / theta2
        c = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * W + c * (W @ W)


@dataclass(frozen=True, eq=False)
class GroupElement:
    """Element of SE_K(3): ``rotation`` (3x3) and ``columns`` (3xK)."""

    rotation: np.ndarray
    columns: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        C = np.asarray(self.columns, dtype=float)
        if C.ndim == 1:
            C = C.reshape(3, -1)
        if R.shape != (3, 3) or C.shape[0] != 3 or C.shape[1] < 1:
            raise ValueError(f"bad group element shapes {R.shape}, {C.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "columns", C)

    @property
    def K(self) -> int:
        return self.columns.shape[1]

    @property
    def dim(self) -> int:
        """Dimension of the tangent space."""
        return 3 * (self.K + 1)

    @classmethod
    def identity(cls, K: int) -> "GroupElement":
        return cls(np.eye(3), np.zeros((3, K)))

    @classmethod
    def from_matrix(cls, M) -> "GroupElement":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3:])

    def matrix(self) -> np.ndarray:
        n = 3 + self.K
        M = np.eye(n)
        M[:3, :3] = self.rotation
        M[:3, 3:] = self.columns
        return M

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    def __repr__(self):
        return f"GroupElement(K={self.K}, rotation={self.rotation.tolist()}, columns={self.columns.T.tolist()})"


def _check_tangent(xi, K: int | None = None) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size < 6 or xi.size % 3:
        raise ValueError(f"tangent vector of length {xi.size} is not 3(K+1) with K >= 1")
    if K is not None and xi.size != 3 * (K + 1):
        raise ValueError(f"tangent vector of length {xi.size} does not match K={K}")
    return xi


def lift(xi) -> np.ndarray:
    """Map a tangent vector to its (3+K)x(3+K) Lie algebra matrix."""
    xi = _check_tangent(xi)
    K = xi.size // 3 - 1
    M = np.zeros((3 + K, 3 + K))
    M[:3, :3] = skew(xi[:3])
    M[:3, 3:] = xi[3:].reshape(K, 3).T
    return M


def unlift(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return np.concatenate([unskew(M[:3, :3]), M[:3, 3:].T.reshape(-1)])


def group_exp(xi) -> GroupElement:
    xi = _check_tangent(xi)
    phi = xi[:3]
    cols = xi[3:].reshape(-1, 3).T
    return GroupElement(so3_exp(phi), so3_left_jacobian(phi) @ cols)


def group_log(X: GroupElement) -> np.ndarray:
    phi = so3_log(X.rotation)
    # J_l is nonsingular for angles below 2*pi.
    cols = np.linalg.solve(so3_left_jacobian(phi), X.columns)
    return np.concatenate([phi, cols.T.reshape(-1)])


def adjoint(X: GroupElement) -> np.ndarray:
    R = X.rotation
    n = X.dim
    Ad = np.zeros((n, n))
    for i in range(X.K + 1):
        Ad[3 * i:3 * i + 3, 3 * i:3 * i + 3] = R
    for i in range(X.K):
        Ad[3 * (i + 1):3 * (i + 2), :3] = skew(X.columns[:, i]) @ R
    return Ad


def compose(A: GroupElement, B: GroupElement) -> GroupElement:
    if A.K != B.K:
        raise ValueError(f"cannot compose SE_{A.K}(3) with SE_{B.K}(3)")
    return GroupElement(A.rotation @ B.rotation, A.rotation @ B.columns + A.columns)


def inverse(X: GroupElement) -> GroupElement:
    Rt = X.rotation.T
    return GroupElement(Rt, -Rt @ X.columns)


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.linalg.norm(R.T @ R - np.eye(3)) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def euler_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X (yaw, pitch, roll) Euler angles to a world<-body rotation."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def rotation_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation`; returns ``(roll, pitch, yaw)``."""
    R = np.asarray(R, dtype=float)
    pitch = math.asin(min(1.0, max(-1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])
