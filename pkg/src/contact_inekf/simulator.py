"""Kinematic biped gait simulator producing ground truth and noisy sensor streams.

The body follows an analytic, twice-differentiable trajectory: a quintic
smoothstep forward-speed ramp, a small vertical settle ("drop") at start-up,
and lateral/angular sway at the stride frequency plus a slow conical torso
lean.  Feet are exactly pinned
while in stance and follow a cycloid while swinging, so the true body-frame
angular rate and specific force come from closed-form derivatives rather
than finite differences.

Noise is drawn from numpy's ``Generator(PCG64)`` seeded through
``SeedSequence(seed)``; the IMU and encoder channels use the first and
second spawned child sequences and draw ``standard_normal`` blocks of
shape ``(n_imu, 6)`` (gyro, accel) and ``(n_encoder, 12)`` (per leg: three
joint angles, three foot-velocity axes) in sample order, so streams are
reproducible across machines for a given numpy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .inekf import GRAVITY, ImuBias, ImuSample, NavState, NoiseParams
from .kinematics import LegModel, inverse_kinematics
from .lie import euler_to_rotation, so3_log

LEGS = ("left", "right")
SIDE = {"left": 1.0, "right": -1.0}


# -- scalar profiles returning (f, f', f'') ----------------------------------


def smoothstep(u):
    """Quintic ``6u^5 - 15u^4 + 10u^3`` clamped to [0, 1], with derivatives in u."""
    if u <= 0.0:
        return 0.0, 0.0, 0.0
    if u >= 1.0:
        return 1.0, 0.0, 0.0
    return (
        u**3 * (10.0 - 15.0 * u + 6.0 * u * u),
        30.0 * u * u * (1.0 - u) ** 2,
        60.0 * u * (1.0 - u) * (1.0 - 2.0 * u),
    )


def _ramp_integral(u):
    """Integral of the smoothstep over [0, u], continued linearly past 1."""
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 0.5 + (u - 1.0)
    return u**6 - 3.0 * u**5 + 2.5 * u**4


def _product(f, g):
    return (f[0] * g[0], f[1] * g[0] + f[0] * g[1], f[2] * g[0] + 2 * f[1] * g[1] + f[0] * g[2])


def _add(f, g):
    return (f[0] + g[0], f[1] + g[1], f[2] + g[2])


def _sine(amp, omega, phase, t):
    a = omega * t + phase
    return amp * math.sin(a), amp * omega * math.cos(a), -amp * omega * omega * math.sin(a)


@dataclass(frozen=True)
class GaitConfig:
    """Scenario parameters.  Rates in Hz, times in s, lengths in m, angles in rad."""

    step_duration: float = 0.6
    double_support: float = 0.2
    v_start: float = 0.0
    v_end: float = 0.3
    ramp_time: float = 3.0
    stand_time: float = 0.5
    body_height: float = 0.9
    drop: float = 0.02
    drop_time: float = 0.2
    step_height: float = 0.05
    lateral_sway: float = 0.02
    roll_sway: float = math.radians(3.0)
    pitch_sway: float = math.radians(2.0)
    yaw_sway: float = math.radians(3.0)
    # Slow conical torso lean: the body z axis circles the vertical once per
    # lean_period, which is what makes the vertical gyro bias observable.
    lean: float = 0.0
    lean_period: float = 8.0
    # Path curvature in 1/m; 0 walks straight along +x.
    curvature: float = 0.0
    walking: bool = True
    imu_rate: float = 800.0
    encoder_rate: float = 2000.0
    duration: float = 10.0
    seed: int = 0
    noise: NoiseParams = field(default_factory=NoiseParams)
    true_bias: ImuBias = field(
        default_factory=lambda: ImuBias([0.002, -0.001, 0.003], [0.02, 0.01, -0.03])
    )
    # "discrete": per-sample std equals the configured value.
    # "density": IMU and contact-velocity values are continuous-time densities
    # (per-sample std = value / sqrt(dt)), matching how the filters use them;
    # encoder noise is a per-reading std in both models.
    noise_model: str = "discrete"
    # "sample": IMU reads the instantaneous rate and specific force at t_k.
    # "increment": IMU reads the averages over [t_k, t_k+1] that make one
    # zero-order-hold Euler step exact (delta-angle / delta-velocity output).
    imu_model: str = "sample"
    left_leg: LegModel = field(default_factory=LegModel.left)
    right_leg: LegModel = field(default_factory=LegModel.right)

    def __post_init__(self):
        for name in ("lean_period", "step_duration", "imu_rate", "encoder_rate", "duration", "ramp_time", "drop_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.double_support < 1.0:
            raise ValueError("double_support must be in [0, 1)")
        if self.noise_model not in ("discrete", "density"):
            raise ValueError(f"unknown noise_model {self.noise_model!r}")
        if self.imu_model not in ("sample", "increment"):
            raise ValueError(f"unknown imu_model {self.imu_model!r}")

    @classmethod
    def desk(cls, **kw) -> "GaitConfig":
        """Reduced-rate preset for quick Monte-Carlo runs."""
        kw.setdefault("imu_rate", 200.0)
        kw.setdefault("encoder_rate", 500.0)
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "GaitConfig":
        return cls(**kw)

    @classmethod
    def stationary(cls, **kw) -> "GaitConfig":
        kw.setdefault("walking", False)
        kw.setdefault("drop", 0.0)
        kw.setdefault("v_end", 0.0)
        return cls(**kw)

    def leg(self, name: str) -> LegModel:
        return self.left_leg if name == "left" else self.right_leg

    def without_noise(self) -> "GaitConfig":
        zero = NoiseParams(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return replace(self, noise=zero, true_bias=ImuBias())


@dataclass(frozen=True, eq=False)
class EncoderSample:
    """Noisy joint angles for every leg, plus a noisy foot-velocity reading.

    ``foot_velocity`` is the world-frame foot velocity plus contact-velocity
    noise; the filters do not consume it, it exists so the contact-velocity
    noise level can be audited like the other channels.
    """

    timestamp: float
    angles: dict
    foot_velocity: dict


@dataclass(frozen=True)
class ContactFlag:
    timestamp: float
    leg: str
    in_contact: bool


Event = Union[ImuSample, EncoderSample, ContactFlag]
# At equal timestamps: contact flags, then encoders, then the IMU.
_PRIORITY = {ContactFlag: 0, EncoderSample: 1, ImuSample: 2}


@dataclass(frozen=True)
class Stance:
    leg: str
    start: float
    end: float
    foothold: np.ndarray


@dataclass(frozen=True, eq=False)
class TruthState:
    t: float
    orientation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray
    omega: np.ndarray  # body frame
    accel: np.ndarray  # world-frame second derivative of position
    feet: dict  # world foot positions
    foot_velocity: dict
    contact: dict

    def nav(self, contact_ids=None) -> NavState:
        ids = [k for k in LEGS if self.contact[k]] if contact_ids is None else contact_ids
        return NavState(self.orientation, self.velocity, self.position, {k: self.feet[k] for k in ids})

    @property
    def specific_force(self) -> np.ndarray:
        """Body-frame accelerometer reading without noise or bias."""
        return self.orientation.T @ (self.accel - GRAVITY)


class Trajectory:
    """Analytic body and foot motion for a :class:`GaitConfig`."""

    def __init__(self, config: GaitConfig):
        self.config = config
        self.stances = self._plan()

    # body ------------------------------------------------------------------

    def _envelope(self, t):
        c = self.config
        s = smoothstep((t - c.stand_time) / c.ramp_time)
        return s[0], s[1] / c.ramp_time, s[2] / c.ramp_time**2

    def body(self, t):
        """Return (p, v, a_world, R, omega_body)."""
        c = self.config
        zero = (0.0, 0.0, 0.0)
        tw = t - c.stand_time
        # arc length along the path
        u = (t - c.stand_time) / c.ramp_time
        dv = c.v_end - c.v_start
        S = smoothstep(u)
        arc = (c.v_start * t + dv * c.ramp_time * _ramp_integral(u), c.v_start + dv * S[0], dv * S[1] / c.ramp_time)
        # settle
        D = smoothstep(t / c.drop_time)
        z = (
            c.body_height + c.drop * (1.0 - D[0]),
            -c.drop * D[1] / c.drop_time,
            -c.drop * D[2] / c.drop_time**2,
        )
        if c.walking and t > c.stand_time:
            E = self._envelope(t)
            w = math.pi / c.step_duration  # one sway cycle per two steps
            y = _product(E, _sine(c.lateral_sway, w, 0.0, tw))
            roll = _product(E, _sine(c.roll_sway, w, 0.0, tw))
            pitch = _product(E, _sine(c.pitch_sway, 2 * w, 0.5, tw))
            yaw = _product(E, _sine(c.yaw_sway, w, 0.3, tw))
            W = 2 * math.pi / c.lean_period
            cos_l = _sine(c.lean, W, math.pi / 2, tw)
            roll = _add(roll, _product(E, _sine(c.lean, W, 0.0, tw)))
            pitch = _add(pitch, _product(E, (c.lean - cos_l[0], -cos_l[1], -cos_l[2])))
        else:
            y = roll = pitch = yaw = zero

        # planar path of curvature k: heading psi = k * arc, lateral sway along the normal
        k = c.curvature
        psi = k * arc[0]
        tx, ty = math.cos(psi), math.sin(psi)  # tangent; normal is (-ty, tx)
        if k == 0.0:
            px, py = arc[0], 0.0
        else:
            px, py = ty / k, (1.0 - tx) / k
        shrink = 1.0 - k * y[0]
        vt, vn = arc[1] * shrink, y[1]
        at = arc[2] * shrink - 2.0 * k * y[1] * arc[1]
        an = k * arc[1] ** 2 * shrink + y[2]
        yaw = (yaw[0] + psi, yaw[1] + k * arc[1], yaw[2] + k * arc[2])

        p = np.array([px - ty * y[0], py + tx * y[0], z[0]])
        v = np.array([tx * vt - ty * vn, ty * vt + tx * vn, z[1]])
        a = np.array([tx * at - ty * an, ty * at + tx * an, z[2]])
        R = euler_to_rotation(roll[0], pitch[0], yaw[0])
        omega = _euler_rates_to_body(roll[0], pitch[0], roll[1], pitch[1], yaw[1])
        return p, v, a, R, omega

    # feet ------------------------------------------------------------------

    def _foothold(self, leg, t_mid):
        """Foot placed beside the path point at ``t_mid``, across the path heading."""
        c = self.config
        p, v = self.body(t_mid)[:2]
        u = (t_mid - c.stand_time) / c.ramp_time
        arc = c.v_start * t_mid + (c.v_end - c.v_start) * c.ramp_time * _ramp_integral(u)
        psi = c.curvature * arc
        normal = np.array([-math.sin(psi), math.cos(psi), 0.0])
        foot = p + SIDE[leg] * abs(c.leg(leg).hip_offset[1]) * normal
        foot[2] = 0.0
        return foot

    def _plan(self):
        c = self.config
        T = c.step_duration
        ds = c.double_support * T
        stances = {leg: [] for leg in LEGS}
        start = {leg: 0.0 for leg in LEGS}
        hold = {leg: self._foothold(leg, 0.0) for leg in LEGS}
        if c.walking:
            k = 0
            while True:
                t_k = c.stand_time + k * T
                if t_k + ds >= c.duration:
                    break
                leg = "right" if k % 2 == 0 else "left"
                lift, land = t_k + ds, t_k + T
                stances[leg].append(Stance(leg, start[leg], lift, hold[leg]))
                start[leg] = land
                hold[leg] = self._foothold(leg, land + (T + ds) / 2.0)
                k += 1
        for leg in LEGS:
            stances[leg].append(Stance(leg, start[leg], math.inf, hold[leg]))
        return stances

    def foot(self, leg, t):
        """World foot position, velocity and contact state at ``t``."""
        plan = self.stances[leg]
        for i, st in enumerate(plan):
            if st.start <= t <= st.end:
                return st.foothold.copy(), np.zeros(3), True
            if t < st.start:
                prev = plan[i - 1]
                dur = st.start - prev.end
                tau = (t - prev.end) / dur
                f0, f1 = prev.foothold, st.foothold
                s = tau - math.sin(2 * math.pi * tau) / (2 * math.pi)
                ds = (1.0 - math.cos(2 * math.pi * tau)) / dur
                h = self.config.step_height
                pos = f0 + (f1 - f0) * s
                pos[2] = f0[2] + h * (1.0 - math.cos(2 * math.pi * tau)) / 2.0
                vel = (f1 - f0) * ds
                vel[2] = h * math.pi * math.sin(2 * math.pi * tau) / dur
                return pos, vel, False
        raise AssertionError("stance plan does not cover t")

    def contact_events(self):
        out = []
        for leg in LEGS:
            for st in self.stances[leg]:
                if st.start > 0.0:
                    out.append(ContactFlag(st.start, leg, True))
                if math.isfinite(st.end):
                    out.append(ContactFlag(st.end, leg, False))
        return out

    def state_at(self, t: float) -> TruthState:
        p, v, a, R, omega = self.body(t)
        feet, vels, contact = {}, {}, {}
        for leg in LEGS:
            feet[leg], vels[leg], contact[leg] = self.foot(leg, t)
        return TruthState(t, R, v, p, omega, a, feet, vels, contact)


def _euler_rates_to_body(roll, pitch, droll, dpitch, dyaw):
    """Body angular velocity for Z-Y-X Euler angles and their rates."""
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    return np.array([
        droll - dyaw * sp,
        dpitch * cr + dyaw * cp * sr,
        -dpitch * sr + dyaw * cp * cr,
    ])


@dataclass(frozen=True, eq=False)
class TruthRecord:
    """True states at every IMU timestamp plus the analytic trajectory."""

    times: np.ndarray
    states: list
    bias: ImuBias
    trajectory: Trajectory

    def state_at(self, t: float) -> TruthState:
        return self.trajectory.state_at(t)

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True, eq=False)
class SensorStream:
    events: list

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def of_type(self, kind):
        return [e for e in self.events if isinstance(e, kind)]


def clean_imu(traj: Trajectory, s: TruthState, dt: float):
    """Noise-free increment-model reading for the interval starting at ``s.t``."""
    _, v1, _, R1, _ = traj.body(s.t + dt)
    R = s.orientation
    omega = so3_log(R.T @ R1) / dt
    accel = R.T @ ((v1 - s.velocity) / dt - GRAVITY)
    return omega, accel


def _sample_times(rate, duration):
    n = int(math.floor(duration * rate + 1e-9)) + 1
    return np.arange(n) / rate


def generate(config: GaitConfig) -> tuple[TruthRecord, SensorStream]:
    """Ground truth and the time-ordered sensor stream for ``config``.

    Raises :class:`~contact_inekf.kinematics.UnreachableError` if a foot
    leaves its leg's workspace.
    """
    traj = Trajectory(config)
    noise = config.noise
    imu_rng, enc_rng = (np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(config.seed).spawn(2))

    imu_t = _sample_times(config.imu_rate, config.duration)
    enc_t = _sample_times(config.encoder_rate, config.duration)
    scale_imu = 1.0 if config.noise_model == "discrete" else math.sqrt(config.imu_rate)
    scale_vel = 1.0 if config.noise_model == "discrete" else math.sqrt(config.encoder_rate)
    imu_noise = imu_rng.standard_normal((imu_t.size, 6))
    enc_noise = enc_rng.standard_normal((enc_t.size, 12))

    events: list = []
    states = []
    bg, ba = config.true_bias.gyro, config.true_bias.accel
    for i, t in enumerate(imu_t):
        s = traj.state_at(float(t))
        states.append(s)
        w, a = clean_imu(traj, s, 1.0 / config.imu_rate) if config.imu_model == "increment" else (s.omega, s.specific_force)
        gyro = w + bg + imu_noise[i, :3] * noise.gyro_std * scale_imu
        accel = a + ba + imu_noise[i, 3:] * noise.accel_std * scale_imu
        events.append(ImuSample(gyro, accel, float(t)))

    for i, t in enumerate(enc_t):
        t = float(t)
        s = traj.state_at(t)
        angles, fvel = {}, {}
        for j, leg in enumerate(LEGS):
            model = config.leg(leg)
            rel = s.orientation.T @ (s.feet[leg] - s.position)
            alpha = inverse_kinematics(model, rel, timestamp=t)
            angles[leg] = alpha + enc_noise[i, 6 * j:6 * j + 3] * noise.encoder_std
            fvel[leg] = s.foot_velocity[leg] + enc_noise[i, 6 * j + 3:6 * j + 6] * noise.contact_vel_std * scale_vel
        events.append(EncoderSample(t, angles, fvel))

    events.extend(ContactFlag(0.0, leg, True) for leg in LEGS)
    events.extend(e for e in traj.contact_events() if e.timestamp <= config.duration)
    events.sort(key=lambda e: (e.timestamp, _PRIORITY[type(e)]))
    return TruthRecord(imu_t, states, config.true_bias, traj), SensorStream(events)


def initial_sampler(seed, zero: bool = False, max_angle=math.radians(30.0), max_speed=1.0):
    """Initial orientation and velocity estimates.

    Roll, pitch and yaw are uniform in ``[-max_angle, max_angle]`` and each
    velocity axis uniform in ``[-max_speed, max_speed]``.  ``seed`` may be an
    int, a ``SeedSequence`` or a ``Generator``.
    """
    if zero:
        return np.eye(3), np.zeros(3)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    roll, pitch, yaw = rng.uniform(-max_angle, max_angle, 3)
    v = rng.uniform(-max_speed, max_speed, 3)
    return euler_to_rotation(roll, pitch, yaw), v


STREAM_COLUMNS = [
    "t", "event", "leg",
    "gyro_x", "gyro_y", "gyro_z", "accel_x", "accel_y", "accel_z",
    "alpha_1", "alpha_2", "alpha_3", "foot_vel_x", "foot_vel_y", "foot_vel_z",
    "contact",
]


def _fmt(x) -> str:
    return f"{x:.9g}"


def write_stream_csv(stream: SensorStream, path) -> None:
    """One row per IMU sample, per leg per encoder sample, and per contact flag."""
    blank = {c: "" for c in STREAM_COLUMNS}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, STREAM_COLUMNS)
        w.writeheader()
        for e in stream:
            if isinstance(e, ImuSample):
                row = dict(blank, t=_fmt(e.timestamp), event="imu")
                for ax, g, a in zip("xyz", e.gyro, e.accel):
                    row[f"gyro_{ax}"], row[f"accel_{ax}"] = _fmt(g), _fmt(a)
                w.writerow(row)
            elif isinstance(e, EncoderSample):
                for leg in LEGS:
                    row = dict(blank, t=_fmt(e.timestamp), event="encoder", leg=leg)
                    for k in range(3):
                        row[f"alpha_{k + 1}"] = _fmt(e.angles[leg][k])
                        row[f"foot_vel_{'xyz'[k]}"] = _fmt(e.foot_velocity[leg][k])
                    w.writerow(row)
            else:
                w.writerow(dict(blank, t=_fmt(e.timestamp), event="contact", leg=e.leg, contact=int(e.in_contact)))
