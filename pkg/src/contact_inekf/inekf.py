"""Contact-aided right-invariant EKF with IMU-bias augmentation.

The group state lives in SE_{N+2}(3) with columns ``(v, p, d_1, ..., d_N)``;
the covariance is that of the augmented right-invariant error
``(xi_R, xi_v, xi_p, xi_d1..xi_dN, zeta_g, zeta_a)``.  Contacts are kept in
insertion order and always sit before the two bias blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Hashable, Mapping, Sequence

import numpy as np

from .lie import (
    GroupElement,
    compose,
    group_exp,
    group_log,
    skew,
    so3_exp,
)

GRAVITY = np.array([0.0, 0.0, -9.81])

# Guard on the innovation covariance before solving for the gain.
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class NavState:
    """Orientation (world<-body), velocity, position and world contact points."""

    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    contacts: Mapping[Hashable, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(
            self,
            "contacts",
            {k: np.asarray(d, dtype=float).reshape(3) for k, d in dict(self.contacts).items()},
        )

    @property
    def contact_ids(self) -> list:
        return list(self.contacts)

    def to_group(self) -> GroupElement:
        cols = [self.velocity, self.position, *self.contacts.values()]
        return GroupElement(self.orientation, np.column_stack(cols))

    @classmethod
    def from_group(cls, X: GroupElement, contact_ids: Sequence[Hashable] = ()) -> "NavState":
        if X.K != 2 + len(contact_ids):
            raise ValueError(f"SE_{X.K}(3) element cannot hold {len(contact_ids)} contacts")
        C = X.columns
        return cls(X.rotation, C[:, 0], C[:, 1], {k: C[:, 2 + i] for i, k in enumerate(contact_ids)})


@dataclass(frozen=True, eq=False)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True, eq=False)
class ImuSample:
    gyro: np.ndarray
    accel: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class KinematicMeasurement:
    """Forward-kinematics reading for one contact.

    ``fk_position`` and ``fk_rotation`` are the foot position and orientation
    in the body frame; ``jacobian`` maps encoder noise into foot position.
    """

    contact_id: Hashable
    fk_position: np.ndarray
    jacobian: np.ndarray
    encoder_cov: np.ndarray
    fk_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "fk_position", np.asarray(self.fk_position, dtype=float).reshape(3))
        J = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
        object.__setattr__(self, "jacobian", J)
        object.__setattr__(self, "encoder_cov", np.atleast_2d(np.asarray(self.encoder_cov, dtype=float)))
        object.__setattr__(self, "fk_rotation", np.asarray(self.fk_rotation, dtype=float).reshape(3, 3))
        if J.shape[0] != 3 or self.encoder_cov.shape != (J.shape[1], J.shape[1]):
            raise ValueError("jacobian must be 3xM and encoder_cov MxM")
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(self.fk_position))):
            raise ValueError("kinematic measurement must be finite")

    @property
    def position_cov(self) -> np.ndarray:
        """Body-frame covariance of the FK position, ``J Cov(w_alpha) J^T``."""
        return self.jacobian @ self.encoder_cov @ self.jacobian.T


@dataclass(frozen=True)
class NoiseParams:
    """Per-axis standard deviations; defaults are the Table-I values of the reference setup."""

    gyro_std: float = 0.002
    accel_std: float = 0.04
    gyro_bias_std: float = 0.001
    accel_bias_std: float = 0.001
    contact_vel_std: float = 0.05
    encoder_std: float = math.radians(1.0)

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def encoder_cov(self, n_joints: int = 3) -> np.ndarray:
        return self.encoder_std**2 * np.eye(n_joints)


@dataclass(frozen=True, eq=False)
class FilterState:
    nav: NavState
    bias: ImuBias
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        n = state_dim(len(self.nav.contacts))
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match {n}x{n}")
        object.__setattr__(self, "cov", cov)

    @property
    def n_contacts(self) -> int:
        return len(self.nav.contacts)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def contact_index(self, contact_id) -> int:
        """Row offset of a contact's block in the covariance."""
        try:
            i = self.nav.contact_ids.index(contact_id)
        except ValueError:
            raise KeyError(f"contact {contact_id!r} is not tracked") from None
        return 9 + 3 * i


def state_dim(n_contacts: int) -> int:
    return 9 + 3 * n_contacts + 6


def initial_covariance(
    orientation_std: float = math.radians(30.0),
    velocity_std: float = 1.0,
    position_std: float = 0.1,
    gyro_bias_std: float = 0.005,
    accel_bias_std: float = 0.05,
    contact_std: float = 0.1,
    n_contacts: int = 0,
) -> np.ndarray:
    """Diagonal prior covariance from per-axis standard deviations."""
    stds = [orientation_std] * 3 + [velocity_std] * 3 + [position_std] * 3
    stds += [contact_std] * (3 * n_contacts)
    stds += [gyro_bias_std] * 3 + [accel_bias_std] * 3
    return np.diag(np.square(stds))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def strapdown(R, v, p, gyro, accel, dt, gravity=GRAVITY):
    """One Euler step of the IMU kinematics under a zero-order hold.

    ``gyro`` and ``accel`` must already be bias-corrected.
    """
    Ra = R @ accel
    R1 = R @ so3_exp(gyro * dt)
    v1 = v + Ra * dt + gravity * dt
    p1 = p + v * dt + 0.5 * Ra * dt * dt + 0.5 * gravity * dt * dt
    return R1, v1, p1


def dynamics(X: GroupElement, gyro, accel, gravity=GRAVITY) -> np.ndarray:
    """Deterministic continuous dynamics ``f_u(X)`` as a (3+K)x(3+K) matrix."""
    n = 3 + X.K
    F = np.zeros((n, n))
    R = X.rotation
    F[:3, :3] = R @ skew(gyro)
    F[:3, 3] = R @ np.asarray(accel, dtype=float) + gravity
    F[:3, 4] = X.columns[:, 0]
    return F


def transition_matrix(A: np.ndarray, dt: float) -> np.ndarray:
    """``expm(A dt)`` for the filter's error-dynamics matrix.

    ``A`` is strictly block upper-triangular in the (group, bias) split and
    its group block is nilpotent of degree 3, so ``A^4 = 0`` and the cubic
    polynomial is exact.
    """
    Adt = A * dt
    Adt2 = Adt @ Adt
    return np.eye(A.shape[0]) + Adt + Adt2 / 2.0 + (Adt2 @ Adt) / 6.0


def kalman_gain(PHt: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``P H^T S^-1`` for a symmetric innovation covariance, with a condition guard."""
    eig = np.linalg.eigvalsh(S)
    if not eig[0] > 0.0 or eig[-1] > MAX_CONDITION * eig[0]:
        raise np.linalg.LinAlgError("innovation covariance is ill-conditioned")
    return np.linalg.solve(S, PHt.T).T


def augment_covariance(P, contact_rows, noise_map, noise_cov) -> np.ndarray:
    """Append a contact block just before the two trailing bias blocks.

    The new contact error is ``contact_rows @ e + noise_map @ w`` with ``e``
    the existing error and ``w ~ N(0, noise_cov)``; this is ``F_a P F_a^T +
    G Cov(w) G^T``.
    """
    n = P.shape[0]
    ng = n - 6
    Fa = np.zeros((n + 3, n))
    Fa[:ng, :ng] = np.eye(ng)
    Fa[ng:ng + 3] = contact_rows
    Fa[ng + 3:, ng:] = np.eye(6)
    G = np.zeros((n + 3, noise_map.shape[1]))
    G[ng:ng + 3] = noise_map
    out = Fa @ P @ Fa.T + G @ noise_cov @ G.T
    return (out + out.T) / 2.0


def marginalize_block(P, k: int) -> np.ndarray:
    """Drop the 3x3 block starting at row ``k`` (``F_r P F_r^T``)."""
    keep = np.r_[0:k, k + 3:P.shape[0]]
    return P[np.ix_(keep, keep)]


class RightInvariantEKF:
    """Propagation and correction for the contact-aided RI-EKF.

    The filter object only carries configuration; every method maps a
    :class:`FilterState` to a new one and never mutates its input.

    Parameters
    ----------
    noise : NoiseParams
    gravity : array_like, optional
        World-frame gravity vector, default ``(0, 0, -9.81)``.
    estimate_bias : bool
        When False the bias blocks of ``A``, ``Q`` and ``P`` are held at
        zero and the bias estimate is a fixed, known input correction.
    """

    def __init__(self, noise: NoiseParams | None = None, gravity=GRAVITY, estimate_bias: bool = True):
        self.noise = noise if noise is not None else NoiseParams()
        self.gravity = np.asarray(gravity, dtype=float).reshape(3)
        self.estimate_bias = estimate_bias
        # Without bias terms A is state independent, so Phi depends on (dim, dt) only.
        self._phi_cache: dict = {}

    def get_params(self) -> dict:
        return {"noise": self.noise, "gravity": self.gravity.copy(), "estimate_bias": self.estimate_bias}

    # -- process model -----------------------------------------------------

    def build_A(self, state: FilterState) -> np.ndarray:
        n = state.dim
        A = np.zeros((n, n))
        A[3:6, 0:3] = skew(self.gravity)
        A[6:9, 3:6] = np.eye(3)
        if self.estimate_bias:
            nav = state.nav
            R = nav.orientation
            bg = n - 6
            A[0:3, bg:bg + 3] = -R
            A[3:6, bg:bg + 3] = -skew(nav.velocity) @ R
            A[6:9, bg:bg + 3] = -skew(nav.position) @ R
            for i, d in enumerate(nav.contacts.values()):
                A[9 + 3 * i:12 + 3 * i, bg:bg + 3] = -skew(d) @ R
            A[3:6, bg + 3:bg + 6] = -R
        return A

    def _transition(self, state: FilterState, dt: float) -> np.ndarray:
        if self.estimate_bias:
            return transition_matrix(self.build_A(state), dt)
        key = (state.dim, dt)
        Phi = self._phi_cache.get(key)
        if Phi is None:
            if len(self._phi_cache) > 64:
                self._phi_cache.clear()
            Phi = transition_matrix(self.build_A(state), dt)
            Phi.flags.writeable = False
            self._phi_cache[key] = Phi
        return Phi

    def continuous_noise(self, state: FilterState) -> np.ndarray:
        """``Q_t``: noise covariance mapped through ``blockdiag(Ad_X, I6)``."""
        n = state.dim
        N = state.n_contacts
        s = self.noise
        diag = [s.gyro_std**2] * 3 + [s.accel_std**2] * 3 + [0.0] * 3
        diag += [s.contact_vel_std**2] * (3 * N)
        if self.estimate_bias:
            diag += [s.gyro_bias_std**2] * 3 + [s.accel_bias_std**2] * 3
        else:
            diag += [0.0] * 6
        G = np.eye(n)
        nav = state.nav
        R = nav.orientation
        for i, col in enumerate([None, nav.velocity, nav.position, *nav.contacts.values()]):
            G[3 * i:3 * i + 3, 3 * i:3 * i + 3] = R
            if col is not None:
                G[3 * i:3 * i + 3, :3] = skew(col) @ R
        return (G * diag) @ G.T

    def propagate(self, state: FilterState, imu: ImuSample, dt: float) -> FilterState:
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        _check_finite(imu.gyro, imu.accel, [dt])
        nav = state.nav
        w = imu.gyro - state.bias.gyro
        a = imu.accel - state.bias.accel

        Phi = self._transition(state, dt)
        Qk = Phi @ self.continuous_noise(state) @ Phi.T * dt
        P = Phi @ state.cov @ Phi.T + Qk
        P = (P + P.T) / 2.0
        if not self.estimate_bias:
            P[-6:, :] = 0.0
            P[:, -6:] = 0.0

        R1, v1, p1 = strapdown(nav.orientation, nav.velocity, nav.position, w, a, dt, self.gravity)
        return FilterState(replace(nav, orientation=R1, velocity=v1, position=p1), state.bias, P)

    # -- measurement model -------------------------------------------------

    def _stack(self, state: FilterState, meas: Sequence[KinematicMeasurement]):
        n = state.dim
        m = len(meas)
        nav = state.nav
        R = nav.orientation
        H = np.zeros((3 * m, n))
        N = np.zeros((3 * m, 3 * m))
        innov = np.zeros(3 * m)
        seen = set()
        for j, z in enumerate(meas):
            if z.contact_id in seen:
                raise ValueError(f"duplicate measurement for contact {z.contact_id!r}")
            seen.add(z.contact_id)
            k = state.contact_index(z.contact_id)
            rows = slice(3 * j, 3 * j + 3)
            H[rows, 6:9] = -np.eye(3)
            H[rows, k:k + 3] = np.eye(3)
            N[rows, rows] = R @ z.position_cov @ R.T
            innov[rows] = R @ z.fk_position + nav.position - nav.contacts[z.contact_id]
        return H, N, innov

    def update_kinematics(self, state: FilterState, meas: Sequence[KinematicMeasurement]) -> FilterState:
        """Joint right-invariant correction from one or more contacts."""
        if not meas:
            return state
        H, Nhat, innov = self._stack(state, meas)
        P = state.cov
        PHt = P @ H.T
        S = H @ PHt + Nhat
        S = (S + S.T) / 2.0
        K = kalman_gain(PHt, S)
        delta = K @ innov

        ng = state.dim - 6
        X = compose(group_exp(delta[:ng]), state.nav.to_group())
        nav = NavState.from_group(X, state.nav.contact_ids)
        bias = state.bias
        if self.estimate_bias:
            bias = ImuBias(bias.gyro + delta[ng:ng + 3], bias.accel + delta[ng + 3:])
        P = (np.eye(state.dim) - K @ H) @ P
        P = (P + P.T) / 2.0
        return FilterState(nav, bias, P)

    # -- contact switching -------------------------------------------------

    def add_contact(self, state: FilterState, contact_id, meas: KinematicMeasurement) -> FilterState:
        """Append a contact initialised from forward kinematics."""
        nav = state.nav
        if contact_id in nav.contacts:
            raise ValueError(f"contact {contact_id!r} is already tracked")
        R = nav.orientation
        d = nav.position + R @ meas.fk_position

        rows = np.zeros((3, state.dim))
        rows[:, 6:9] = np.eye(3)
        P = augment_covariance(state.cov, rows, R @ meas.jacobian, meas.encoder_cov)

        contacts = dict(nav.contacts)
        contacts[contact_id] = d
        return FilterState(replace(nav, contacts=contacts), state.bias, P)

    def remove_contact(self, state: FilterState, contact_id) -> FilterState:
        P = marginalize_block(state.cov, state.contact_index(contact_id))
        contacts = {i: d for i, d in state.nav.contacts.items() if i != contact_id}
        return FilterState(replace(state.nav, contacts=contacts), state.bias, P)


# -- analysis helpers -------------------------------------------------------


def right_invariant_error(truth: NavState, estimate: NavState) -> np.ndarray:
    """``log(X_hat X^-1)`` between two navigation states with the same contacts."""
    if set(truth.contacts) != set(estimate.contacts):
        raise ValueError("truth and estimate track different contacts")
    # X_hat X^-1 = (R_hat R^T, c_hat - R_hat R^T c) for every column c
    dR = estimate.orientation @ truth.orientation.T
    pairs = [(estimate.velocity, truth.velocity), (estimate.position, truth.position)]
    pairs += [(d, truth.contacts[k]) for k, d in estimate.contacts.items()]
    cols = np.column_stack([c_hat - dR @ c for c_hat, c in pairs])
    return group_log(GroupElement(dR, cols))


def bias_free_transition(dt: float, gravity=GRAVITY) -> np.ndarray:
    """Closed-form single-contact transition matrix without biases (12x12)."""
    Phi = np.eye(12)
    G = skew(gravity)
    Phi[3:6, 0:3] = G * dt
    Phi[6:9, 0:3] = 0.5 * G * dt * dt
    Phi[6:9, 3:6] = np.eye(3) * dt
    return Phi


def observability_matrix(n_steps: int, dt: float, gravity=GRAVITY) -> np.ndarray:
    """Stack ``H Phi^k`` for the bias-free, single-contact filter."""
    H = np.zeros((3, 12))
    H[:, 6:9] = -np.eye(3)
    H[:, 9:12] = np.eye(3)
    Phi = bias_free_transition(dt, gravity)
    blocks = []
    M = np.eye(12)
    for _ in range(n_steps):
        blocks.append(H @ M)
        M = Phi @ M
    return np.vstack(blocks)


def numerical_rank(M: np.ndarray, rtol: float = 1e-8) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0


def null_space(M: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical null space."""
    _, s, Vt = np.linalg.svd(M)
    r = int(np.sum(s > rtol * s[0]))
    return Vt[r:].T


def unobservable_dim(n_steps: int = 10, dt: float = 0.01, gravity=GRAVITY) -> int:
    return 12 - numerical_rank(observability_matrix(n_steps, dt, gravity))


def unobservable_basis(n_contacts: int, with_bias: bool = True, gravity=GRAVITY) -> np.ndarray:
    """Right-invariant error directions that no measurement can see.

    Three joint translations of body and contacts plus a rotation about
    gravity; these do not depend on the state estimate.
    """
    n = state_dim(n_contacts) if with_bias else 9 + 3 * n_contacts
    B = np.zeros((n, 4))
    g = np.asarray(gravity, dtype=float)
    B[0:3, 0] = -g / np.linalg.norm(g)
    for axis in range(3):
        for blk in [2] + [3 + i for i in range(n_contacts)]:
            B[3 * blk + axis, 1 + axis] = 1.0
    return B


def state_to_row(state: FilterState) -> dict:
    """Flat, CSV-ready view of a filter state."""
    nav = state.nav
    row = {}
    for name, vec in (("v", nav.velocity), ("p", nav.position), ("bg", state.bias.gyro), ("ba", state.bias.accel)):
        for axis, value in zip("xyz", vec):
            row[f"{name}_{axis}"] = float(value)
    for i, value in enumerate(nav.orientation.reshape(-1)):
        row[f"R_{i // 3}{i % 3}"] = float(value)
    for cid, d in nav.contacts.items():
        for axis, value in zip("xyz", d):
            row[f"d[{cid}]_{axis}"] = float(value)
    for i in range(state.dim):
        row[f"P_{i}{i}"] = float(state.cov[i, i])
    return row
