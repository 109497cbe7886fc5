"""Episode-driver tests.

The compiled kernels are pinned against the numpy reference implementations
in model.py, then the integrator invariants (determinism, energy balance,
event refinement) are checked on passive and servo episodes.
"""

import numpy as np
import pytest

import stumblekit._kernels as K
from stumblekit.model import (
    Config,
    Stance,
    State,
    forward_kinematics,
    heel_strike_guard,
    impact_map,
    mass_matrix_and_bias,
    stance_pack,
)
from stumblekit.simulate import (
    ControllerSpec,
    TrajectoryRef,
    _segment,
    integrate_until_event,
    time_pd,
    total_energy,
)
from tests.conftest import random_state_vectors


def zero_torque_controller():
    traj = TrajectoryRef(np.array([0.0, 10.0]), np.zeros((2, 5)), np.zeros((2, 5)))
    return ControllerSpec(mode="time-pd", kp=np.zeros(4), kd=np.zeros(4),
                          saturation=np.full(4, 1e3), trajectory=traj)


def passive_fall_state(stance=Stance.PROSTHETIC):
    """Forward-rotating chain, swing foot ahead and above ground."""
    q = np.array([0.02, 0.23, 0.33, -0.25, -0.05])
    qd = np.array([-1.5, 0.0, 0.0, 0.0, 0.0])
    return State(Config(q, stance), qd)


# ---------------------------------------------------------------------------
# compiled kernels vs numpy reference


def test_kernel_terms_match_numpy(params):
    rng = np.random.default_rng(21)
    for stance in (Stance.PROSTHETIC, Stance.CONTRALATERAL):
        pack = stance_pack(params, stance)
        for q, qd in zip(*random_state_vectors(rng, 40)):
            M_np, b_np = mass_matrix_and_bias(pack, q, qd)
            M_nb, b_nb = K.terms(q, qd, pack.P, pack.inertias, pack.gw)
            assert np.max(np.abs(M_np - M_nb)) < 1e-12
            assert np.max(np.abs(b_np - b_nb)) < 1e-12


def test_kernel_impact_matches_numpy(params):
    rng = np.random.default_rng(22)
    for stance in (Stance.PROSTHETIC, Stance.CONTRALATERAL):
        pack = stance_pack(params, stance)
        for q, qd in zip(*random_state_vectors(rng, 20)):
            post = impact_map(params, State(Config(q, stance), qd))
            q_nb, qd_nb = K.impact_kernel(q, qd, pack.P, pack.inertias,
                                          pack.mw, pack.pt_swing_foot, pack.total_mass)
            assert np.allclose(post.q, q_nb, atol=1e-12)
            assert np.allclose(post.qdot, qd_nb, atol=1e-10)
            assert post.stance == stance.flipped()


def test_kernel_swing_foot_matches_fk(params):
    rng = np.random.default_rng(23)
    pack = stance_pack(params, Stance.PROSTHETIC)
    for q, qd in zip(*random_state_vectors(rng, 10)):
        px, py, _, _ = K._swing_foot(q, qd, pack.pt_swing_foot)
        fk = forward_kinematics(params, Config(q, Stance.PROSTHETIC))
        assert np.allclose([px, py], fk.swing_foot, atol=1e-12)


# ---------------------------------------------------------------------------
# integrator invariants


def test_determinism_bit_identical(params):
    x0 = passive_fall_state()
    ctrl = zero_torque_controller()
    a = integrate_until_event(params, ctrl, x0, horizon=0.8)
    b = integrate_until_event(params, ctrl, x0, horizon=0.8)
    assert np.array_equal(a.t, b.t)
    assert np.array_equal(a.q, b.q)
    assert np.array_equal(a.qd, b.qd)
    assert np.array_equal(a.u, b.u)
    assert a.outcome == b.outcome and a.events == b.events


def test_times_strictly_increasing(params):
    log = integrate_until_event(params, zero_torque_controller(),
                                passive_fall_state(), horizon=1.0)
    assert np.all(np.diff(log.t) > 0)


def test_energy_balance_unactuated(params):
    """Passive swing conserves total energy to 1e-5 per step at dt=1e-3."""
    x0 = passive_fall_state()
    log = integrate_until_event(params, zero_torque_controller(), x0,
                                horizon=0.25, apply_impact=False)
    energies = np.array([
        total_energy(params, State(Config(log.q[i], x0.stance), log.qd[i]))
        for i in range(len(log.t))
    ])
    assert np.max(np.abs(np.diff(energies))) < 1e-5
    assert abs(energies[-1] - energies[0]) < 1e-5


def test_zero_torque_forward_lean_falls(params):
    q = np.array([0.3, 0.05, -0.2, -0.4, -0.01])
    x0 = State(Config(q, Stance.PROSTHETIC), np.array([-0.5, 0.0, 0.0, 0.0, 0.0]))
    log = integrate_until_event(params, zero_torque_controller(), x0, horizon=5.0)
    assert log.outcome == "fell"


def test_heel_strike_event_and_impact(params):
    x0 = passive_fall_state()
    assert heel_strike_guard(params, x0) > 0
    log = integrate_until_event(params, zero_torque_controller(), x0, horizon=2.0)
    assert log.outcome == "converged"
    assert log.events["t_f"] is not None
    assert log.post_impact is not None
    assert log.post_impact.stance == Stance.CONTRALATERAL
    # swing foot essentially on the ground at the refined event time
    assert abs(heel_strike_guard(params, log.final_state())) < 1e-6


def test_event_time_invariant_to_dt_halving(params):
    x0 = passive_fall_state()
    ctrl = zero_torque_controller()
    t_coarse = integrate_until_event(params, ctrl, x0, horizon=2.0, dt=1e-3).events["t_f"]
    t_fine = integrate_until_event(params, ctrl, x0, horizon=2.0, dt=5e-4).events["t_f"]
    assert t_coarse is not None and t_fine is not None
    assert abs(t_coarse - t_fine) < 1e-6


def test_timeout_label(params):
    x0 = passive_fall_state()
    log = integrate_until_event(params, zero_torque_controller(), x0, horizon=0.05)
    assert log.outcome == "timeout"
    assert log.events["t_f"] is None
    assert log.t[-1] == pytest.approx(0.05)


def test_time_pd_holds_posture(params):
    """Strong PD on all actuators pins the actuated joints at their refs."""
    q0 = np.array([0.0, 0.02, -0.02, -0.3, -0.04])
    x0 = State(Config(q0, Stance.PROSTHETIC), np.zeros(5))
    ref = np.tile(q0, (2, 1))
    traj = TrajectoryRef(np.array([0.0, 10.0]), ref, np.zeros((2, 5)))
    ctrl = time_pd(traj, kp=np.full(4, 3000.0), kd=np.full(4, 120.0),
                   saturation=np.full(4, 500.0))
    log = integrate_until_event(params, ctrl, x0, horizon=0.5, apply_impact=False)
    err = np.abs(log.q[:, 1:5] - q0[1:5])
    assert np.max(err) < 0.02


def test_zero_hold_gains_match_no_hold(params):
    """The hold overlay with zero gains must not perturb the trajectory."""
    x0 = passive_fall_state()
    jm = np.zeros(4, dtype=np.int64)
    kp = np.zeros(4)
    kd = np.zeros(4)
    sat = np.full(4, 100.0)
    common = dict(joint_mode=jm, kp=kp, kd=kd, sat=sat, stop_frac=10.0)
    _, logs_plain, end_plain, _ = _segment(
        params, x0.stance, x0.q, x0.qdot, 0.0, 0.3, 1e-3, **common)
    fk = forward_kinematics(params, x0.config)
    _, logs_hold, end_hold, _ = _segment(
        params, x0.stance, x0.q, x0.qdot, 0.0, 0.3, 1e-3,
        hold=(0.0, 0.0, fk.swing_foot[0], fk.swing_foot[1]), **common)
    assert np.array_equal(logs_plain[1], logs_hold[1])
    assert np.array_equal(logs_plain[2], logs_hold[2])
    assert end_plain[0] == end_hold[0]


def test_controller_validation():
    with pytest.raises(ValueError):
        ControllerSpec(mode="pid")
    with pytest.raises(ValueError):
        ControllerSpec(mode="time-pd")  # trajectory missing
    with pytest.raises(ValueError):
        ControllerSpec(mode="phase-pd")  # gait missing
    traj = TrajectoryRef(np.array([0.0, 1.0]), np.zeros((2, 5)), np.zeros((2, 5)))
    with pytest.raises(ValueError):
        ControllerSpec(mode="time-pd", trajectory=traj, kp=-np.ones(4))
    with pytest.raises(ValueError):
        TrajectoryRef(np.array([0.0, 0.0]), np.zeros((2, 5)), np.zeros((2, 5)))


def test_episode_log_export(params, tmp_path):
    log = integrate_until_event(params, zero_torque_controller(),
                                passive_fall_state(), horizon=0.1)
    csv_path = tmp_path / "ep.csv"
    json_path = tmp_path / "ep.json"
    log.to_csv(csv_path)
    log.to_json(json_path)
    rows = csv_path.read_text().strip().splitlines()
    assert rows[0].split(",") == (["t"] + [f"q{i}" for i in range(5)]
                                  + [f"qd{i}" for i in range(5)]
                                  + [f"u{i}" for i in range(4)] + ["theta"])
    assert len(rows) == len(log.t) + 1
    import json as _json
    doc = _json.loads(json_path.read_text())
    assert doc["outcome"] == log.outcome
