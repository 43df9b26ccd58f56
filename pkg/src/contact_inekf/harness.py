"""Monte-Carlo convergence experiment: RI-EKF vs Q-EKF on one shared stream.

Config grammar: one ``key = value`` pair per line; ``#`` starts a comment;
blank lines are ignored; vectors are comma-separated.  Unknown keys and
unparsable values are errors.  See :data:`SCHEMA` for the keys.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .inekf import (
    FilterState,
    ImuBias,
    ImuSample,
    KinematicMeasurement,
    NavState,
    NoiseParams,
    RightInvariantEKF,
    initial_covariance,
    right_invariant_error,
    unobservable_basis,
)
from .kinematics import LegModel, fk_position, fk_rotation, jacobian
from .lie import rotation_to_euler
from .qekf import QekfState, QuaternionEKF, invariant_jacobian, local_error
from .simulator import (
    LEGS,
    ContactFlag,
    EncoderSample,
    GaitConfig,
    SensorStream,
    TruthRecord,
    generate,
    initial_sampler,
)

log = logging.getLogger(__name__)

FILTERS = ("riekf", "qekf")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _vec3(text: str) -> tuple:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated numbers, got {text!r}")
    return tuple(parts)


def _rate(text: str):
    """A rate in Hz, or ``preset`` to take it from the gait preset."""
    return None if text.strip().lower() == "preset" else float(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


# key -> (parser, default)
SCHEMA = {
    "trials": (int, 100),
    "seed": (int, 0),
    "filter": (_choice("riekf", "qekf", "both"), "both"),
    "preset": (_choice("desk", "paper"), "desk"),
    "duration": (float, 10.0),
    "imu_rate": (_rate, None),  # None ("preset"): taken from the preset
    "encoder_rate": (_rate, None),
    # imu: correct at every IMU step with the latest encoder reading;
    # encoder: propagate to and correct at every encoder sample
    "update_rate": (_choice("encoder", "imu"), "imu"),
    "log_rate": (float, 100.0),
    "workers": (int, 1),
    "estimate_bias": (_bool, False),
    "zero_init": (_bool, False),
    "sim_noise": (_bool, True),
    "noise_model": (_choice("discrete", "density"), "discrete"),
    "imu_model": (_choice("sample", "increment"), "sample"),
    "filter_noise": (_choice("table", "matched"), "table"),
    # Table I noise (per-axis standard deviations)
    "gyro_std": (float, 0.002),
    "accel_std": (float, 0.04),
    "gyro_bias_std": (float, 0.001),
    "accel_bias_std": (float, 0.001),
    "contact_vel_std": (float, 0.05),
    "encoder_std_deg": (float, 1.0),
    # auto: the stream carries the true biases only when estimate_bias is on
    "sim_bias": (_choice("auto", "on", "off"), "auto"),
    "true_gyro_bias": (_vec3, (0.002, -0.001, 0.003)),
    "true_accel_bias": (_vec3, (0.02, 0.01, -0.03)),
    # Table I initial covariance (per-axis standard deviations)
    "init_orientation_std_deg": (float, 30.0),
    "init_velocity_std": (float, 1.0),
    "init_position_std": (float, 0.1),
    "init_gyro_bias_std": (float, 0.005),
    "init_accel_bias_std": (float, 0.05),
    # sampling range of the initial estimate
    "init_angle_deg": (float, 30.0),
    "init_speed": (float, 1.0),
    # convergence criterion
    "conv_angle_deg": (float, 2.0),
    "conv_velocity": (float, 0.1),
    "conv_dwell": (float, 0.5),
    # gait
    "step_duration": (float, 0.6),
    "double_support": (float, 0.2),
    "v_start": (float, 0.0),
    "v_end": (float, 0.3),
    "ramp_time": (float, 3.0),
    "stand_time": (float, 0.5),
    "body_height": (float, 0.9),
    "drop": (float, 0.02),
    "step_height": (float, 0.05),
    "lateral_sway": (float, 0.02),
    "roll_sway_deg": (float, 3.0),
    "pitch_sway_deg": (float, 2.0),
    "yaw_sway_deg": (float, 3.0),
    "lean_deg": (float, 0.0),
    "lean_period": (float, 8.0),
    "curvature": (float, 0.0),
    # leg model (left leg; the right leg mirrors y)
    "hip_offset": (_vec3, (0.0, 0.1, -0.2)),
    "thigh": (float, 0.4),
    "shank": (float, 0.4),
}


def _format_value(v) -> str:
    if v is None:
        return "preset"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values = {k: d for k, (_, d) in SCHEMA.items()}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = SCHEMA[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, str(path))

    def override(self, **kw) -> "ExperimentConfig":
        values = dict(self.values)
        for k, v in kw.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            values[k] = v
        cfg = ExperimentConfig(values)
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        if v["trials"] < 1:
            raise ConfigError("trials must be >= 1")
        if v["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        for key in ("duration", "log_rate", "conv_dwell"):
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        try:
            rate = self.gait().imu_rate
        except ValueError as exc:
            raise ConfigError(f"invalid gait: {exc}") from None
        stride = rate / v["log_rate"]
        if abs(stride - round(stride)) > 1e-9 or stride < 1:
            raise ConfigError(f"log_rate {v['log_rate']} must divide imu_rate {rate}")
        try:
            self.noise()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in SCHEMA)

    # derived objects -------------------------------------------------------

    def noise(self) -> NoiseParams:
        v = self.values
        return NoiseParams(
            v["gyro_std"], v["accel_std"], v["gyro_bias_std"], v["accel_bias_std"],
            v["contact_vel_std"], math.radians(v["encoder_std_deg"]),
        )

    def filter_noise(self) -> NoiseParams:
        """Noise the filters assume.

        "table" feeds the configured values to the filters as continuous-time
        densities.  "matched" converts discrete per-sample IMU stds to the
        density that reproduces them (std * sqrt(dt)), so the filter is
        consistent with the simulated stream.
        """
        n = self.noise()
        if self.values["filter_noise"] == "table" or self.values["noise_model"] == "density":
            return n
        dt = 1.0 / self.gait().imu_rate
        return replace(n, gyro_std=n.gyro_std * math.sqrt(dt), accel_std=n.accel_std * math.sqrt(dt))

    def legs(self) -> dict:
        hip = np.array(self.hip_offset)
        mirrored = hip * [1.0, -1.0, 1.0]
        return {
            "left": LegModel(hip_offset=hip, thigh=self.thigh, shank=self.shank),
            "right": LegModel(hip_offset=mirrored, thigh=self.thigh, shank=self.shank),
        }

    def gait(self) -> GaitConfig:
        v = self.values
        preset = GaitConfig.desk if v["preset"] == "desk" else GaitConfig.paper
        kw = {}
        if v["imu_rate"] is not None:
            kw["imu_rate"] = v["imu_rate"]
        if v["encoder_rate"] is not None:
            kw["encoder_rate"] = v["encoder_rate"]
        legs = self.legs()
        cfg = preset(
            step_duration=v["step_duration"],
            double_support=v["double_support"],
            v_start=v["v_start"],
            v_end=v["v_end"],
            ramp_time=v["ramp_time"],
            stand_time=v["stand_time"],
            body_height=v["body_height"],
            drop=v["drop"],
            step_height=v["step_height"],
            lateral_sway=v["lateral_sway"],
            roll_sway=math.radians(v["roll_sway_deg"]),
            pitch_sway=math.radians(v["pitch_sway_deg"]),
            yaw_sway=math.radians(v["yaw_sway_deg"]),
            lean=math.radians(v["lean_deg"]),
            lean_period=v["lean_period"],
            curvature=v["curvature"],
            duration=v["duration"],
            seed=v["seed"],
            noise=self.noise(),
            true_bias=self.true_bias(),
            noise_model=v["noise_model"],
            imu_model=v["imu_model"],
            left_leg=legs["left"],
            right_leg=legs["right"],
            **kw,
        )
        return cfg if v["sim_noise"] else cfg.without_noise()

    def true_bias(self) -> ImuBias:
        v = self.values
        on = v["estimate_bias"] if v["sim_bias"] == "auto" else v["sim_bias"] == "on"
        return ImuBias(v["true_gyro_bias"], v["true_accel_bias"]) if on else ImuBias()

    def prior_covariance(self, n_contacts: int = 0) -> np.ndarray:
        v = self.values
        return initial_covariance(
            orientation_std=math.radians(v["init_orientation_std_deg"]),
            velocity_std=v["init_velocity_std"],
            position_std=v["init_position_std"],
            gyro_bias_std=v["init_gyro_bias_std"],
            accel_bias_std=v["init_accel_bias_std"],
            n_contacts=n_contacts,
        )

    def filters(self) -> list:
        return list(FILTERS) if self.filter == "both" else [self.filter]


# -- seeding ------------------------------------------------------------------


def trial_seed(master: int, trial: int) -> np.random.SeedSequence:
    """Seed of trial ``k``: independent of how many trials run or in which order.

    The simulator uses spawn keys ``(0,)`` and ``(1,)`` of the master seed,
    so trials live under ``(2, k)``.
    """
    return np.random.SeedSequence(entropy=master, spawn_key=(2, trial))


def sample_initial_estimate(cfg: ExperimentConfig, trial: int):
    rng = np.random.default_rng(trial_seed(cfg.seed, trial))
    return initial_sampler(
        rng, zero=cfg.zero_init, max_angle=math.radians(cfg.init_angle_deg), max_speed=cfg.init_speed
    )


# -- metrics ------------------------------------------------------------------


def observable_complement(unobservable: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of ``unobservable``'s span."""
    q, _ = np.linalg.qr(unobservable, mode="complete")
    return q[:, unobservable.shape[1]:]


def nees(error: np.ndarray, cov: np.ndarray, unobservable: np.ndarray | None = None, complement=None) -> float:
    """``e^T P^-1 e`` restricted to the complement of ``unobservable``'s span.

    ``complement`` may pass a precomputed projection ``U`` instead: any
    n x (n - k) matrix whose transpose has exactly the unobservable span as
    its kernel gives the same value, orthonormal or not.
    """
    error = np.asarray(error, dtype=float)
    U = complement
    if U is None and unobservable is not None and unobservable.shape[1]:
        U = observable_complement(unobservable)
    if U is not None:
        error = U.T @ error
        cov = U.T @ cov @ U
    return float(error @ np.linalg.solve(cov, error))


@lru_cache(maxsize=None)
def _riekf_complement(n_contacts: int, with_bias: bool) -> np.ndarray:
    U = observable_complement(unobservable_basis(n_contacts, with_bias=with_bias))
    U.flags.writeable = False
    return U


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def convergence_time(t, ok, dwell: float) -> float:
    """First time from which ``ok`` holds continuously for at least ``dwell``."""
    t = np.asarray(t, dtype=float)
    ok = np.asarray(ok, dtype=bool)
    start = None
    for ti, oi in zip(t, ok):
        if oi:
            if start is None:
                start = ti
            if ti - start >= dwell - 1e-9:
                return float(start)
        else:
            start = None
    return math.inf


# -- running a filter over the stream -----------------------------------------

ROW_COLUMNS = (
    ["t"]
    + [f"{a}_true_deg" for a in ("roll", "pitch", "yaw")]
    + [f"{a}_est_deg" for a in ("roll", "pitch", "yaw")]
    + [f"vb_{ax}_true" for ax in "xyz"]
    + [f"vb_{ax}_est" for ax in "xyz"]
    + ["pos_err"]
    + [f"bg_{ax}" for ax in "xyz"]
    + [f"ba_{ax}" for ax in "xyz"]
    + ["nees", "nees_dof"]
)


@dataclass
class TrialResult:
    trial: int
    kind: str
    rows: np.ndarray
    convergence_time: float
    diverged: bool = False
    message: str = ""

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, ROW_COLUMNS.index(name)]


def make_filter(kind: str, cfg: ExperimentConfig):
    cls = RightInvariantEKF if kind == "riekf" else QuaternionEKF
    return cls(noise=cfg.filter_noise(), estimate_bias=cfg.estimate_bias)


def initial_state(kind: str, cfg: ExperimentConfig, truth: TruthRecord, trial: int):
    R0, v0 = sample_initial_estimate(cfg, trial)
    p0 = truth.states[0].position
    nav = NavState(R0, v0, p0)
    P0 = cfg.prior_covariance()
    if kind == "riekf":
        return FilterState(nav, ImuBias(), P0)
    return QekfState.from_nav(nav, ImuBias(), P0)


def _error_and_complement(kind, truth_nav, est, with_bias, true_bias):
    if kind == "riekf":
        err = right_invariant_error(truth_nav, est.nav)
        U = _riekf_complement(len(est.nav.contacts), with_bias)
        if with_bias:
            err = np.r_[err, est.bias.vector() - true_bias.vector()]
    else:
        err = local_error(truth_nav, est)
        # U_RI^T T has kernel T^-1 span(B_RI), the local unobservable span
        T = invariant_jacobian(est.nav, with_bias=with_bias)
        U = T.T @ _riekf_complement(len(est.nav.contacts), with_bias)
        if with_bias:
            err = np.r_[err, true_bias.vector() - est.bias.vector()]
    return err, U


def state_nees(kind, truth_state, est, with_bias, true_bias) -> tuple[float, int]:
    """NEES over the observable subspace and its degrees of freedom."""
    ids = list(est.nav.contacts)
    truth_nav = truth_state.nav(ids)
    err, U = _error_and_complement(kind, truth_nav, est, with_bias, true_bias)
    P = est.cov if with_bias else est.cov[:-6, :-6]
    return nees(err, P, complement=U), U.shape[1]


def _measurement(leg, model, alpha, enc_cov):
    return KinematicMeasurement(leg, fk_position(model, alpha), jacobian(model, alpha), enc_cov, fk_rotation(model, alpha))


def encoder_measurements(cfg: ExperimentConfig, stream: SensorStream) -> dict:
    """Forward kinematics of every encoder sample, keyed by ``id(sample)``.

    Depends only on the stream, so it is computed once and shared by all
    trials and filters.
    """
    legs = cfg.legs()
    enc_cov = cfg.noise().encoder_cov()
    return {
        id(ev): {leg: _measurement(leg, legs[leg], ev.angles[leg], enc_cov) for leg in LEGS}
        for ev in stream
        if isinstance(ev, EncoderSample)
    }


def run_filter(
    kind: str,
    cfg: ExperimentConfig,
    truth: TruthRecord,
    stream: SensorStream,
    trial: int = 0,
    measurements: dict | None = None,
) -> TrialResult:
    """Run one filter through the stream, logging at ``cfg.log_rate``."""
    if measurements is None:
        measurements = encoder_measurements(cfg, stream)
    gait = cfg.gait()
    filt = make_filter(kind, cfg)
    state = initial_state(kind, cfg, truth, trial)
    true_bias = gait.true_bias
    stride = int(round(gait.imu_rate / cfg.log_rate))
    n_rows = int(round(cfg.duration * cfg.log_rate))
    by_encoder = cfg.update_rate == "encoder"

    rows = []
    t_prev = 0.0
    last_imu = None
    last_enc = None
    pending: set = set()
    imu_index = 0
    diverged, message = False, ""

    def kinematic_step(s, enc):
        fk = measurements[id(enc)]
        for leg in [lg for lg in LEGS if lg in pending]:
            s = filt.add_contact(s, leg, fk[leg])
            pending.discard(leg)
        return filt.update_kinematics(s, [fk[leg] for leg in LEGS if leg in s.nav.contacts])

    try:
        for ev in stream:
            if isinstance(ev, ContactFlag):
                # removal needs no propagation; additions wait for the next kinematic step
                if ev.in_contact:
                    pending.add(ev.leg)
                else:
                    pending.discard(ev.leg)
                    if ev.leg in state.nav.contacts:
                        state = filt.remove_contact(state, ev.leg)
                continue
            if isinstance(ev, EncoderSample):
                last_enc = ev
                if not by_encoder:
                    continue
            t = ev.timestamp
            if t > t_prev and last_imu is not None:
                state = filt.propagate(state, last_imu, t - t_prev)
                t_prev = t
            if isinstance(ev, ImuSample):
                if not by_encoder and last_enc is not None:
                    state = kinematic_step(state, last_enc)
                if imu_index % stride == 0 and len(rows) < n_rows:
                    rows.append(_log_row(kind, t, truth.states[imu_index], state, cfg.estimate_bias, true_bias))
                last_imu = ev
                imu_index += 1
            else:
                state = kinematic_step(state, ev)
            if not np.all(np.isfinite(state.cov)):
                raise FloatingPointError("non-finite covariance")
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        diverged, message = True, f"{type(exc).__name__}: {exc}"
        log.warning("trial %d (%s) diverged: %s", trial, kind, message)

    arr = np.array(rows) if rows else np.zeros((0, len(ROW_COLUMNS)))
    if arr.size and not np.all(np.isfinite(arr)):
        diverged, message = True, message or "non-finite log entries"
    conv = math.inf
    if not diverged and arr.size:
        conv = convergence_time(arr[:, 0], _converged_mask(arr, cfg), cfg.conv_dwell)
    return TrialResult(trial, kind, arr, conv, diverged, message)


def _log_row(kind, t, truth_state, est, with_bias, true_bias) -> list:
    eul_t = np.degrees(rotation_to_euler(truth_state.orientation))
    eul_e = np.degrees(rotation_to_euler(est.nav.orientation))
    vb_t = truth_state.orientation.T @ truth_state.velocity
    vb_e = est.nav.orientation.T @ est.nav.velocity
    pos_err = float(np.linalg.norm(est.nav.position - truth_state.position))
    try:
        score, dof = state_nees(kind, truth_state, est, with_bias, true_bias)
    except (np.linalg.LinAlgError, ValueError):
        score, dof = math.nan, math.nan
    return [t, *eul_t, *eul_e, *vb_t, *vb_e, pos_err, *est.bias.gyro, *est.bias.accel, score, dof]


def _converged_mask(rows: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    c = ROW_COLUMNS.index
    roll = np.abs(_wrap(np.radians(rows[:, c("roll_est_deg")] - rows[:, c("roll_true_deg")])))
    pitch = np.abs(_wrap(np.radians(rows[:, c("pitch_est_deg")] - rows[:, c("pitch_true_deg")])))
    vt = rows[:, c("vb_x_true"):c("vb_z_true") + 1]
    ve = rows[:, c("vb_x_est"):c("vb_z_est") + 1]
    tol = math.radians(cfg.conv_angle_deg)
    return (roll < tol) & (pitch < tol) & np.all(np.abs(ve - vt) < cfg.conv_velocity, axis=1)


# -- experiment ---------------------------------------------------------------

_WORKER_CACHE: dict = {}


def _stream_for(cfg: ExperimentConfig):
    key = cfg.to_text()
    if key not in _WORKER_CACHE:
        _WORKER_CACHE.clear()
        truth, stream = generate(cfg.gait())
        _WORKER_CACHE[key] = (truth, stream, encoder_measurements(cfg, stream))
    return _WORKER_CACHE[key]


def run_trial(cfg: ExperimentConfig, trial: int, kinds=None) -> list:
    """Run trial ``trial`` for each filter kind; usable on its own."""
    truth, stream, meas = _stream_for(cfg)
    return [run_filter(kind, cfg, truth, stream, trial, meas) for kind in (kinds or cfg.filters())]


def _run_trial_args(args):
    return run_trial(*args)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trials: dict  # kind -> list[TrialResult] in trial order
    summary: dict  # kind -> metrics


def summarize(results: list, cfg: ExperimentConfig) -> dict:
    times = np.array([r.convergence_time for r in results])
    conv = np.isfinite(times)
    finals = [r.rows[-1] for r in results if not r.diverged and r.rows.size]
    c = ROW_COLUMNS.index
    if finals:
        F = np.array(finals)
        roll = np.degrees(_wrap(np.radians(F[:, c("roll_est_deg")] - F[:, c("roll_true_deg")])))
        pitch = np.degrees(_wrap(np.radians(F[:, c("pitch_est_deg")] - F[:, c("pitch_true_deg")])))
        dv = F[:, c("vb_x_est"):c("vb_z_est") + 1] - F[:, c("vb_x_true"):c("vb_z_true") + 1]
        rms = (
            float(np.sqrt(np.mean(roll**2))),
            float(np.sqrt(np.mean(pitch**2))),
            float(np.sqrt(np.mean(np.sum(dv**2, axis=1)))),
        )
    else:
        rms = (math.nan,) * 3
    scored = [r.rows for r in results if r.rows.size]
    cover = per_dof = math.nan
    if scored:
        S = np.concatenate(scored)
        val, dof = S[:, c("nees")], S[:, c("nees_dof")]
        keep = np.isfinite(val) & (dof > 0)
        if keep.any():
            cover = float(np.mean(val[keep] <= chi2.ppf(0.95, dof[keep])))
            per_dof = float(np.mean(val[keep] / dof[keep]))
    q25, q75 = _quartiles(times)
    return {
        "trials": len(results),
        "converged": int(conv.sum()),
        "converged_fraction": float(conv.mean()) if times.size else math.nan,
        "diverged": int(sum(r.diverged for r in results)),
        "median_convergence_time": float(np.median(times)) if times.size else math.nan,
        "iqr_low": float(q25),
        "iqr_high": float(q75),
        "final_rms_roll_deg": rms[0],
        "final_rms_pitch_deg": rms[1],
        "final_rms_body_velocity": rms[2],
        "nees_per_dof": per_dof,
        "nees_coverage_95": cover,
    }


def _quartiles(times: np.ndarray):
    """25th/75th percentiles where non-converged trials count as +inf."""
    if not times.size:
        return math.nan, math.nan
    big = 1e300
    q = np.percentile(np.where(np.isfinite(times), times, big), [25, 75])
    return tuple(math.inf if x >= 1e299 else float(x) for x in q)


SUMMARY_COLUMNS = [
    "filter", "trials", "converged", "converged_fraction", "diverged",
    "median_convergence_time", "iqr_low", "iqr_high",
    "final_rms_roll_deg", "final_rms_pitch_deg", "final_rms_body_velocity",
    "nees_per_dof", "nees_coverage_95",
]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.9g}"


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> ExperimentResult:
    """Run every trial and filter; write CSVs when ``out_dir`` is given."""
    kinds = cfg.filters()
    jobs = [(cfg, k, kinds) for k in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_trial = list(pool.map(_run_trial_args, jobs))
    else:
        per_trial = []
        for job in jobs:
            per_trial.append(_run_trial_args(job))
            if progress:
                progress(job[1] + 1, cfg.trials)
    trials = {kind: [res[i] for res in per_trial] for i, kind in enumerate(kinds)}
    summary = {kind: summarize(trials[kind], cfg) for kind in kinds}
    result = ExperimentResult(cfg, trials, summary)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_trial_csv(result: TrialResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_COLUMNS)
        for row in result.rows:
            w.writerow([_fmt(x) for x in row])


def write_summary_csv(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for kind, m in summary.items():
            w.writerow([kind] + [_fmt(m[c]) for c in SUMMARY_COLUMNS[1:]])


def write_outputs(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    (out / "trials").mkdir(parents=True, exist_ok=True)
    for kind, rs in result.trials.items():
        for r in rs:
            write_trial_csv(r, out / "trials" / f"trial_{r.trial:03d}_{kind}.csv")
    write_summary_csv(result.summary, out / "summary.csv")
    (out / "config.txt").write_text(result.config.to_text())
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "filter", "convergence_time", "diverged", "message"])
        for kind, rs in result.trials.items():
            for r in rs:
                w.writerow([r.trial, kind, _fmt(r.convergence_time), int(r.diverged), r.message])


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
