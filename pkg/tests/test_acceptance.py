"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (listed again in the terminal
summary).  Runtime budgets are measured with ``time.perf_counter`` around the
work of the criterion only.
"""

import math
import time

import numpy as np

from contact_inekf.harness import ExperimentConfig, run_experiment, run_trial
from contact_inekf.inekf import (
    GRAVITY,
    FilterState,
    ImuBias,
    ImuSample,
    KinematicMeasurement,
    NavState,
    RightInvariantEKF,
    dynamics,
    initial_covariance,
    null_space,
    numerical_rank,
    observability_matrix,
    transition_matrix,
    unobservable_basis,
)
from contact_inekf.kinematics import LegModel, fk_position, inverse_kinematics, jacobian
from contact_inekf.lie import GroupElement, compose, group_exp, inverse
from contact_inekf.simulator import LEGS, EncoderSample, GaitConfig, generate

from conftest import random_element, random_rotation

DT = 0.005


def _uniform_ball(rng, radius):
    d = rng.normal(size=3)
    return d / np.linalg.norm(d) * radius * rng.uniform() ** (1 / 3)


# 1 ---------------------------------------------------------------------------


def test_log_linear_exactness(verdict):
    start = time.perf_counter()
    f = RightInvariantEKF(estimate_bias=False)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        truth = FilterState(
            NavState(random_rotation(rng), rng.normal(size=3), rng.normal(size=3), {0: rng.normal(size=3)}),
            ImuBias(),
            initial_covariance(n_contacts=1),
        )
        # rotation error up to 60 deg, velocity error up to 1 m/s
        angle = np.radians(60.0) * rng.uniform() ** (1 / 3)
        axis = rng.normal(size=3)
        xi0 = np.r_[axis / np.linalg.norm(axis) * angle, _uniform_ball(rng, 1.0), rng.normal(scale=0.1, size=6)]
        est = FilterState(NavState.from_group(compose(group_exp(xi0), truth.nav.to_group()), [0]), ImuBias(), truth.cov)
        Phi = transition_matrix(f.build_A(truth), DT)[:12, :12]
        xi = xi0
        # smooth, walking-like inputs: gyro ~ 1 rad/s, specific force ~ gravity + 3 m/s^2
        phase = rng.uniform(0, 2 * np.pi, 6)
        for k in range(1000):
            t = k * DT
            gyro = np.sin(2 * np.pi * 1.3 * t + phase[:3])
            accel = -truth.nav.orientation.T @ GRAVITY + 3.0 * np.sin(2 * np.pi * 0.7 * t + phase[3:])
            imu = ImuSample(gyro, accel)
            truth = f.propagate(truth, imu, DT)
            est = f.propagate(est, imu, DT)
            xi = Phi @ xi
            E = compose(est.nav.to_group(), inverse(truth.nav.to_group()))
            worst = max(worst, float(np.abs(group_exp(xi).matrix() - E.matrix()).max()))
    elapsed = time.perf_counter() - start
    verdict(1, "log-linear exactness", worst < 1e-6 and elapsed < 10.0, f"max deviation {worst:.2e}, {elapsed:.1f} s")


# 2 ---------------------------------------------------------------------------


def test_group_affine_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(21)
    worst = 0.0
    for i in range(1000):
        K = 3 + i % 3  # velocity, position and one to three contacts
        X1, X2 = random_element(rng, K), random_element(rng, K)
        w, a = rng.normal(size=3), rng.normal(scale=5.0, size=3)
        I = GroupElement.identity(K)
        lhs = dynamics(compose(X1, X2), w, a)
        rhs = dynamics(X1, w, a) @ X2.matrix() + X1.matrix() @ dynamics(X2, w, a) - X1.matrix() @ dynamics(I, w, a) @ X2.matrix()
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    elapsed = time.perf_counter() - start
    verdict(2, "group-affine identity", worst < 1e-10 and elapsed < 5.0, f"max residual {worst:.2e}, {elapsed:.2f} s")


# 3 ---------------------------------------------------------------------------


def test_observability_rank(verdict):
    start = time.perf_counter()
    O = observability_matrix(10, DT)
    rank = numerical_rank(O)
    N = null_space(O)
    B = unobservable_basis(1, with_bias=False)
    B = B / np.linalg.norm(B, axis=0)
    # both bases span the same space: B lies in span(N) and dimensions agree
    gap = float(np.linalg.norm(B - N @ (N.T @ B), 2)) if N.shape[1] else 1.0
    residual = float(np.abs(O @ B).max())
    elapsed = time.perf_counter() - start
    ok = rank == 8 and N.shape[1] == 4 and gap < 1e-8 and residual < 1e-8 and elapsed < 1.0
    verdict(3, "observability rank", ok, f"rank {rank}/12, null space {N.shape[1]}, subspace gap {gap:.1e}, {elapsed:.3f} s")


# 4 ---------------------------------------------------------------------------


def test_monte_carlo_convergence(verdict):
    cfg = ExperimentConfig().override(trials=100, preset="desk", filter="both", estimate_bias=False, workers=1)
    start = time.perf_counter()
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    ri, q = result.summary["riekf"], result.summary["qekf"]
    ratio = q["median_convergence_time"] / ri["median_convergence_time"] if ri["median_convergence_time"] > 0 else math.inf
    ok = (
        ri["converged_fraction"] == 1.0
        and ri["median_convergence_time"] < q["median_convergence_time"]
        and ratio >= 1.5
        and elapsed < 300.0
    )
    detail = (
        f"RI-EKF converged {ri['converged_fraction']:.2f}, median {ri['median_convergence_time']:.3f} s; "
        f"Q-EKF converged {q['converged_fraction']:.2f}, median {q['median_convergence_time']:.3f} s; "
        f"ratio {ratio:.2f}; {elapsed:.0f} s"
    )
    verdict(4, "Monte-Carlo convergence", ok, detail)


# 5 ---------------------------------------------------------------------------


def test_noise_fidelity(verdict):
    # stationary robot: 1e5 IMU samples, 1e5 per-leg encoder and foot-velocity readings
    cfg = GaitConfig.stationary(imu_rate=10_000.0, encoder_rate=5_000.0, duration=10.0, seed=5)
    truth, stream = generate(cfg)
    imu = stream.of_type(ImuSample)
    gyro = np.array([e.gyro for e in imu]) - np.array([s.omega for s in truth.states]) - cfg.true_bias.gyro
    accel = np.array([e.accel for e in imu]) - np.array([s.specific_force for s in truth.states]) - cfg.true_bias.accel
    enc, vel = [], []
    s = truth.states[0]
    ik = {leg: inverse_kinematics(cfg.leg(leg), s.orientation.T @ (s.feet[leg] - s.position)) for leg in LEGS}
    for e in stream.of_type(EncoderSample):
        for leg in LEGS:
            enc.append(e.angles[leg] - ik[leg])
            vel.append(e.foot_velocity[leg] - s.foot_velocity[leg])
    enc, vel = np.array(enc), np.array(vel)
    n = cfg.noise
    checks = {
        "accel": (accel, n.accel_std),
        "gyro": (gyro, n.gyro_std),
        "contact velocity": (vel, n.contact_vel_std),
        "encoder": (enc, n.encoder_std),
    }
    parts, ok = [], True
    for name, (res, sigma) in checks.items():
        rel = res.std() / sigma - 1.0
        ok &= len(res) >= 100_000 and abs(rel) < 0.03
        parts.append(f"{name} {res.std():.4g} ({rel:+.2%}, n={len(res)})")
    verdict(5, "noise fidelity", ok, "; ".join(parts))


# 6 ---------------------------------------------------------------------------


def _self_consistency(imu_model, update_rate):
    cfg = ExperimentConfig().override(
        trials=1, preset="desk", duration=10.0, sim_noise=False, zero_init=True, filter="riekf",
        imu_model=imu_model, update_rate=update_rate,
    )
    (r,) = run_trial(cfg, 0)
    return float(np.sqrt(np.mean(r.column("pos_err") ** 2))), r.diverged


def test_self_consistency(verdict):
    rms, diverged = _self_consistency("increment", "encoder")
    # instantaneous IMU samples carry first-order discretization error; reported for reference
    rms_sample, _ = _self_consistency("sample", "encoder")
    detail = f"RMS position error {rms * 1e3:.3f} mm (increment IMU); sample IMU {rms_sample * 1e3:.2f} mm"
    verdict(6, "self-consistency", rms < 1e-3 and not diverged, detail)


# 7 ---------------------------------------------------------------------------


def test_gyro_bias_converges(verdict):
    base = ExperimentConfig().override(
        trials=1, preset="desk", duration=30.0, estimate_bias=True, zero_init=True, filter="riekf",
        update_rate="imu", filter_noise="matched", gyro_bias_std=1e-5, accel_bias_std=1e-5,
        contact_vel_std=0.005, lean_deg=10.0, lean_period=8.0,
    )
    rng = np.random.default_rng(7)
    cases = [base, base.override(seed=1, true_gyro_bias=tuple(rng.uniform(-0.005, 0.005, 3)),
                                 true_accel_bias=tuple(rng.uniform(-0.05, 0.05, 3)))]
    worst, ok = 0.0, True
    for cfg in cases:
        (r,) = run_trial(cfg, 0)
        err = np.array([r.column(f"bg_{a}")[-1] for a in "xyz"]) - np.array(cfg.true_gyro_bias)
        worst = max(worst, float(np.abs(err).max()))
        ok &= not r.diverged and r.column("t")[-1] >= 30.0 - 1.0 / cfg.log_rate - 1e-9
    verdict(7, "gyro-bias convergence", ok and worst < 1e-3, f"max |gyro bias error| at 30 s {worst:.2e} rad/s over {len(cases)} runs")


# 8 ---------------------------------------------------------------------------


def test_contact_bookkeeping(verdict):
    rng = np.random.default_rng(8)
    f = RightInvariantEKF()
    leg = LegModel.left()

    def measurement(cid):
        alpha = rng.uniform([-0.3, -0.8, 0.4], [0.3, 0.8, 1.8])
        return KinematicMeasurement(cid, fk_position(leg, alpha), jacobian(leg, alpha), 3e-4 * np.eye(3))

    # add-then-remove is exact
    exact = True
    for n in range(3):
        A = rng.normal(size=(15 + 3 * n, 15 + 3 * n))
        s = FilterState(NavState(random_rotation(rng), rng.normal(size=3), rng.normal(size=3),
                                 {i: rng.normal(size=3) for i in range(n)}), ImuBias(), A @ A.T + np.eye(len(A)))
        back = f.remove_contact(f.add_contact(s, "new", measurement("new")), "new")
        exact &= np.array_equal(back.cov, s.cov) and list(back.nav.contacts) == list(s.nav.contacts)

    # random add / update / remove sequences
    worst_asym, worst_eig = 0.0, math.inf
    s = FilterState(NavState(), ImuBias(), initial_covariance())
    ops = 0
    for _ in range(10_000):
        for _ in range(rng.integers(1, 4)):
            ids = list(s.nav.contacts)
            op = rng.integers(3)
            if op == 0 and len(ids) < 4:
                cid = next(i for i in range(4) if i not in ids)
                s = f.add_contact(s, cid, measurement(cid))
            elif op == 1 and ids:
                s = f.update_kinematics(s, [measurement(c) for c in ids])
            elif ids:
                s = f.remove_contact(s, ids[rng.integers(len(ids))])
            ops += 1
        s = f.propagate(s, ImuSample(rng.normal(size=3), -GRAVITY + rng.normal(size=3)), DT)
        scale = np.abs(s.cov).max()
        worst_asym = max(worst_asym, float(np.abs(s.cov - s.cov.T).max() / scale))
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(s.cov).min() / scale))
    ok = exact and worst_asym < 1e-12 and worst_eig > -1e-12
    detail = f"add/remove exact {exact}; {ops} random ops: asymmetry {worst_asym:.1e}, min eigenvalue/scale {worst_eig:.1e}"
    verdict(8, "contact bookkeeping", ok, detail)


# 9 ---------------------------------------------------------------------------


def test_kinematics_jacobian(verdict):
    rng = np.random.default_rng(9)
    h = 1e-6
    worst = 0.0
    for i in range(100):
        model = LegModel.left() if i % 2 == 0 else LegModel.right()
        alpha = rng.uniform(-np.pi, np.pi, 3)
        J = jacobian(model, alpha)
        for j in range(3):
            d = np.zeros(3)
            d[j] = h
            col = (fk_position(model, alpha + d) - fk_position(model, alpha - d)) / (2 * h)
            worst = max(worst, float(np.abs(J[:, j] - col).max()))
    verdict(9, "kinematic Jacobian", worst < 1e-6, f"max |J - finite difference| {worst:.1e} at 100 configurations")
