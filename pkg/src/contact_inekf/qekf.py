"""Quaternion error-state EKF baseline.

Same state and measurements as the right-invariant filter, but the error is
the conventional one: a local (body-frame) multiplicative attitude error
``R = R_hat exp(dtheta)`` and additive errors ``x = x_hat + dx`` for
velocity, position, contacts and biases.  The error ordering is
``(dtheta, dv, dp, dd_1..dd_N, dbg, dba)``, matching the RI-EKF layout.

Because the Jacobians depend on the current estimate, a poor initial
estimate feeds straight into the linearization; this is the behaviour the
invariant filter is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .inekf import (
    GRAVITY,
    ImuBias,
    ImuSample,
    KinematicMeasurement,
    NavState,
    NoiseParams,
    _check_finite,
    augment_covariance,
    kalman_gain,
    marginalize_block,
    state_dim,
    strapdown,
    unobservable_basis,
)
from .lie import skew, so3_log


@dataclass(frozen=True)
class Quaternion:
    """Hamilton unit quaternion, scalar first."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        if abs(self.norm() - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {self.norm()} is not 1")

    @classmethod
    def from_array(cls, a, normalize: bool = True) -> "Quaternion":
        a = np.asarray(a, dtype=float).reshape(4)
        if normalize:
            a = a / np.linalg.norm(a)
        return cls(*(float(c) for c in a))

    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.array(), other.array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def to_rotation(self) -> np.ndarray:
        return quat_to_rotation(self.array())

    @classmethod
    def from_rotation(cls, R) -> "Quaternion":
        return cls.from_array(rotation_to_quat(R))

    @classmethod
    def from_rotvec(cls, phi) -> "Quaternion":
        return cls.from_array(quat_exp(phi))


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_exp(phi) -> np.ndarray:
    """Unit quaternion of the rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    half = 0.5 * np.linalg.norm(phi)
    # sin(h)/h via sinc, exact at zero
    return np.concatenate([[np.cos(half)], 0.5 * np.sinc(half / np.pi) * phi])


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    cands = [tr, R[0, 0], R[1, 1], R[2, 2]]
    i = int(np.argmax(cands))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True, eq=False)
class QekfState:
    q: Quaternion
    velocity: np.ndarray
    position: np.ndarray
    contacts: Mapping[Hashable, np.ndarray] = field(default_factory=dict)
    bias: ImuBias = field(default_factory=ImuBias)
    cov: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(
            self, "contacts", {k: np.asarray(d, dtype=float).reshape(3) for k, d in dict(self.contacts).items()}
        )
        cov = np.asarray(self.cov, dtype=float)
        n = state_dim(len(self.contacts))
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match {n}x{n}")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_rotation", self.q.to_rotation())

    @classmethod
    def from_nav(cls, nav: NavState, bias: ImuBias, cov) -> "QekfState":
        return cls(Quaternion.from_rotation(nav.orientation), nav.velocity, nav.position, nav.contacts, bias, cov)

    @property
    def orientation(self) -> np.ndarray:
        return self._rotation

    @property
    def nav(self) -> NavState:
        return NavState(self.orientation, self.velocity, self.position, self.contacts)

    @property
    def contact_ids(self) -> list:
        return list(self.contacts)

    @property
    def n_contacts(self) -> int:
        return len(self.contacts)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def contact_index(self, contact_id) -> int:
        try:
            i = self.contact_ids.index(contact_id)
        except ValueError:
            raise KeyError(f"contact {contact_id!r} is not tracked") from None
        return 9 + 3 * i


class QuaternionEKF:
    """Error-state EKF with a local multiplicative attitude error.

    Parameters mirror :class:`~contact_inekf.inekf.RightInvariantEKF`.
    """

    def __init__(self, noise: NoiseParams | None = None, gravity=GRAVITY, estimate_bias: bool = True):
        self.noise = noise if noise is not None else NoiseParams()
        self.gravity = np.asarray(gravity, dtype=float).reshape(3)
        self.estimate_bias = estimate_bias

    def get_params(self) -> dict:
        return {"noise": self.noise, "gravity": self.gravity.copy(), "estimate_bias": self.estimate_bias}

    def error_jacobian(self, state: QekfState, gyro, accel) -> np.ndarray:
        """Continuous error-state matrix ``F`` at the current estimate.

        ``gyro`` and ``accel`` are bias-corrected.
        """
        n = state.dim
        R = state.orientation
        F = np.zeros((n, n))
        F[0:3, 0:3] = -skew(gyro)
        F[3:6, 0:3] = -R @ skew(accel)
        F[6:9, 3:6] = np.eye(3)
        if self.estimate_bias:
            F[0:3, n - 6:n - 3] = -np.eye(3)
            F[3:6, n - 3:] = -R
        return F

    def continuous_noise(self, state: QekfState) -> np.ndarray:
        n = state.dim
        s = self.noise
        R = state.orientation
        G = np.zeros((n, n))
        G[0:3, 0:3] = -np.eye(3)
        G[3:6, 3:6] = -R
        G[9:n - 6, 9:n - 6] = np.eye(n - 15)
        G[n - 6:, n - 6:] = np.eye(6)
        diag = [s.gyro_std**2] * 3 + [s.accel_std**2] * 3 + [0.0] * 3
        diag += [s.contact_vel_std**2] * (3 * state.n_contacts)
        if self.estimate_bias:
            diag += [s.gyro_bias_std**2] * 3 + [s.accel_bias_std**2] * 3
        else:
            diag += [0.0] * 6
        return (G * diag) @ G.T

    def propagate(self, state: QekfState, imu: ImuSample, dt: float) -> QekfState:
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        _check_finite(imu.gyro, imu.accel, [dt])
        w = imu.gyro - state.bias.gyro
        a = imu.accel - state.bias.accel

        Phi = expm(self.error_jacobian(state, w, a) * dt)
        Qk = Phi @ self.continuous_noise(state) @ Phi.T * dt
        P = Phi @ state.cov @ Phi.T + Qk
        P = (P + P.T) / 2.0
        if not self.estimate_bias:
            P[-6:, :] = 0.0
            P[:, -6:] = 0.0

        _, v1, p1 = strapdown(state.orientation, state.velocity, state.position, w, a, dt, self.gravity)
        q1 = Quaternion.from_array(quat_multiply(state.q.array(), quat_exp(w * dt)))
        return replace(state, q=q1, velocity=v1, position=p1, cov=P)

    def _stack(self, state: QekfState, meas: Sequence[KinematicMeasurement]):
        n = state.dim
        m = len(meas)
        R = state.orientation
        H = np.zeros((3 * m, n))
        N = np.zeros((3 * m, 3 * m))
        resid = np.zeros(3 * m)
        seen = set()
        for j, z in enumerate(meas):
            if z.contact_id in seen:
                raise ValueError(f"duplicate measurement for contact {z.contact_id!r}")
            seen.add(z.contact_id)
            k = state.contact_index(z.contact_id)
            rows = slice(3 * j, 3 * j + 3)
            r = R.T @ (state.contacts[z.contact_id] - state.position)
            H[rows, 0:3] = skew(r)
            H[rows, 6:9] = -R.T
            H[rows, k:k + 3] = R.T
            N[rows, rows] = z.position_cov
            resid[rows] = z.fk_position - r
        return H, N, resid

    def update_kinematics(self, state: QekfState, meas: Sequence[KinematicMeasurement]) -> QekfState:
        if not meas:
            return state
        H, N, resid = self._stack(state, meas)
        P = state.cov
        PHt = P @ H.T
        S = H @ PHt + N
        S = (S + S.T) / 2.0
        K = kalman_gain(PHt, S)
        dx = K @ resid

        q = Quaternion.from_array(quat_multiply(state.q.array(), quat_exp(dx[0:3])))
        contacts = {cid: d + dx[9 + 3 * i:12 + 3 * i] for i, (cid, d) in enumerate(state.contacts.items())}
        bias = state.bias
        if self.estimate_bias:
            bias = ImuBias(bias.gyro + dx[-6:-3], bias.accel + dx[-3:])
        P = (np.eye(state.dim) - K @ H) @ P
        P = (P + P.T) / 2.0
        return replace(
            state,
            q=q,
            velocity=state.velocity + dx[3:6],
            position=state.position + dx[6:9],
            contacts=contacts,
            bias=bias,
            cov=P,
        )

    def add_contact(self, state: QekfState, contact_id, meas: KinematicMeasurement) -> QekfState:
        if contact_id in state.contacts:
            raise ValueError(f"contact {contact_id!r} is already tracked")
        R = state.orientation
        # d = p + R exp(dtheta) fk  =>  dd = dp - R skew(fk) dtheta + R J dalpha
        rows = np.zeros((3, state.dim))
        rows[:, 0:3] = -R @ skew(meas.fk_position)
        rows[:, 6:9] = np.eye(3)
        P = augment_covariance(state.cov, rows, R @ meas.jacobian, meas.encoder_cov)
        contacts = dict(state.contacts)
        contacts[contact_id] = state.position + R @ meas.fk_position
        return replace(state, contacts=contacts, cov=P)

    def remove_contact(self, state: QekfState, contact_id) -> QekfState:
        P = marginalize_block(state.cov, state.contact_index(contact_id))
        contacts = {i: d for i, d in state.contacts.items() if i != contact_id}
        return replace(state, contacts=contacts, cov=P)


def local_error(truth: NavState, estimate: QekfState) -> np.ndarray:
    """The Q-EKF's own error ``(log(R_hat^T R), v - v_hat, ..., )`` without biases."""
    if set(truth.contacts) != set(estimate.contacts):
        raise ValueError("truth and estimate track different contacts")
    parts = [
        so3_log(estimate.orientation.T @ truth.orientation),
        truth.velocity - estimate.velocity,
        truth.position - estimate.position,
    ]
    parts += [truth.contacts[k] - d for k, d in estimate.contacts.items()]
    return np.concatenate(parts)


def invariant_jacobian(nav: NavState, with_bias: bool = True) -> np.ndarray:
    """First-order map from the local error to the right-invariant error.

    With the local error ``(dtheta, dx)`` measured truth-minus-estimate and
    the invariant error ``log(X_hat X^-1)``, ``xi_R = -R_hat dtheta`` and each
    column obeys ``xi_c = -dc - skew(c_hat) R_hat dtheta``; biases map to
    ``-dbias``.
    """
    R = nav.orientation
    cols = [nav.velocity, nav.position, *nav.contacts.values()]
    ng = 3 * (len(cols) + 1)
    n = ng + 6 if with_bias else ng
    T = -np.eye(n)
    T[0:3, 0:3] = -R
    for i, c in enumerate(cols):
        T[3 + 3 * i:6 + 3 * i, 0:3] = -skew(c) @ R
    return T


def local_unobservable_basis(nav: NavState, with_bias: bool = True, gravity=GRAVITY) -> np.ndarray:
    """Unobservable directions expressed in the local error coordinates."""
    B = unobservable_basis(len(nav.contacts), with_bias=with_bias, gravity=gravity)
    return np.linalg.solve(invariant_jacobian(nav, with_bias), B)
