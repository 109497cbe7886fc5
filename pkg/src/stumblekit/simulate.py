"""Hybrid-system episode drivers.

Event-detecting RK4 integration (fixed step, bisection-refined events),
controller plumbing (phase PD, trajectory-tracking PD, swing-foot hold
overlay), multi-step walking, and the toe-catch stumble episode.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .model import (
    Config,
    ModelParams,
    Stance,
    State,
    forward_kinematics,
    impact_map,
    kinetic_energy,
    potential_energy,
    stance_pack,
)

DT_DEFAULT = 1e-3
ARM_FRACTION = 0.2
CONVERGE_TOL = 1e-3
VELOCITY_WEIGHT = 0.1
HOLD_WINDOW = (0.60, 0.80)
HOLD_DRIFT_WARN_M = 0.01

# per-actuator defaults: [stance hip, swing hip, swing knee, stance knee]
DEFAULT_KP = np.array([1400.0, 900.0, 450.0, 1400.0])
DEFAULT_KD = np.array([90.0, 60.0, 30.0, 90.0])
DEFAULT_SAT = np.array([260.0, 260.0, 160.0, 260.0])
DEFAULT_HOLD_KP = 4000.0
DEFAULT_HOLD_KD = 150.0

_DUMMY_T = np.array([0.0, 1.0])
_DUMMY_TRAJ = np.zeros((2, 5))


@dataclass
class TrajectoryRef:
    """Explicit joint reference, times relative to its anchoring event."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=float).ravel()
        self.q = np.ascontiguousarray(self.q, dtype=float)
        self.qd = np.ascontiguousarray(self.qd, dtype=float)
        n = len(self.t)
        if self.q.shape != (n, 5) or self.qd.shape != (n, 5):
            raise ValueError("trajectory arrays must be (n,), (n,5), (n,5)")
        if n < 2 or np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory times must be strictly increasing, n >= 2")

    def sample(self, t_rel):
        t_rel = np.asarray(t_rel, dtype=float)
        q = np.stack([np.interp(t_rel, self.t, self.q[:, j]) for j in range(5)], axis=-1)
        qd = np.stack([np.interp(t_rel, self.t, self.qd[:, j]) for j in range(5)], axis=-1)
        return q, qd


@dataclass
class ControllerSpec:
    """Joint PD law: mode picks the reference source.

    phase-pd tracks the gait Bezier references in the phase variable,
    time-pd tracks an explicit TrajectoryRef, swing-hold-overlay is the
    stumble-window composite (nominal phase tracking plus a task-space
    swing-foot hold mapped through the swing-leg Jacobian transpose).
    """

    mode: str
    kp: np.ndarray = field(default_factory=lambda: DEFAULT_KP.copy())
    kd: np.ndarray = field(default_factory=lambda: DEFAULT_KD.copy())
    saturation: np.ndarray = field(default_factory=lambda: DEFAULT_SAT.copy())
    gait: object = None
    trajectory: TrajectoryRef | None = None
    hold_kp: float = DEFAULT_HOLD_KP
    hold_kd: float = DEFAULT_HOLD_KD

    def __post_init__(self):
        if self.mode not in ("phase-pd", "time-pd", "swing-hold-overlay"):
            raise ValueError(f"unknown controller mode {self.mode!r}")
        self.kp = np.broadcast_to(np.asarray(self.kp, dtype=float), (4,)).copy()
        self.kd = np.broadcast_to(np.asarray(self.kd, dtype=float), (4,)).copy()
        self.saturation = np.broadcast_to(np.asarray(self.saturation, dtype=float), (4,)).copy()
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ValueError("gains must be nonnegative")
        if np.any(self.saturation <= 0):
            raise ValueError("saturation must be positive")
        if self.mode == "time-pd" and self.trajectory is None:
            raise ValueError("time-pd requires a trajectory")
        if self.mode in ("phase-pd", "swing-hold-overlay") and self.gait is None:
            raise ValueError(f"{self.mode} requires a gait reference")
        if self.hold_kp < 0 or self.hold_kd < 0:
            raise ValueError("hold gains must be nonnegative")


def phase_pd(gait, kp=None, kd=None, saturation=None) -> ControllerSpec:
    return ControllerSpec(
        mode="phase-pd", gait=gait,
        kp=DEFAULT_KP if kp is None else kp,
        kd=DEFAULT_KD if kd is None else kd,
        saturation=DEFAULT_SAT if saturation is None else saturation)


def time_pd(trajectory: TrajectoryRef, kp=None, kd=None, saturation=None) -> ControllerSpec:
    return ControllerSpec(
        mode="time-pd", trajectory=trajectory,
        kp=DEFAULT_KP if kp is None else kp,
        kd=DEFAULT_KD if kd is None else kd,
        saturation=DEFAULT_SAT if saturation is None else saturation)


@dataclass
class EpisodeLog:
    """Immutable record of a single continuous-plus-impact episode."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    stance: Stance
    outcome: str  # converged | fell | timeout
    events: dict
    post_impact: State | None = None

    def final_state(self) -> State:
        return State(Config(self.q[-1].copy(), self.stance), self.qd[-1].copy())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"q{i}" for i in range(5)]
                       + [f"qd{i}" for i in range(5)] + [f"u{i}" for i in range(4)] + ["theta"])
            for i in range(len(self.t)):
                w.writerow([f"{self.t[i]:.9f}"]
                           + [f"{v:.12g}" for v in self.q[i]]
                           + [f"{v:.12g}" for v in self.qd[i]]
                           + [f"{v:.12g}" for v in self.u[i]]
                           + [f"{self.theta[i]:.12g}"])

    def to_json(self, path) -> None:
        doc = {
            "outcome": self.outcome,
            "stance": self.stance.label,
            "events": {k: (None if v is None else (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)))
                       for k, v in self.events.items()},
            "n_samples": int(len(self.t)),
            "t_final": float(self.t[-1]),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)


def total_energy(params: ModelParams, state: State) -> float:
    pack = stance_pack(params, state.stance)
    return float(kinetic_energy(pack, state.q, state.qdot) + potential_energy(pack, state.q))


def weighted_distance(a: State, b: State, velocity_weight: float = VELOCITY_WEIGHT) -> float:
    dq = a.q - b.q
    dv = velocity_weight * (a.qdot - b.qdot)
    return float(np.sqrt(dq @ dq + dv @ dv))


# ---------------------------------------------------------------------------
# kernel plumbing


def _gait_tables(gait, stance: Stance):
    """(pos (5,6), vel (5,6), th0, thf) for the phase matching `stance`."""
    i = int(stance)
    return (np.ascontiguousarray(gait.phase_pos[i]),
            np.ascontiguousarray(gait.phase_vel[i]),
            float(gait.theta_ranges[i, 0]), float(gait.theta_ranges[i, 1]))


_ZERO_TABLE = np.zeros((5, 6))


def _segment(params, stance, q0, qd0, t0, horizon, dt, *,
             gait=None, theta_range=None,
             joint_mode=None, kp=None, kd=None, sat=None,
             traj=None, traj_anchor=0.0,
             hold=None,  # (kp, kd, px, py) or None
             stop_frac=10.0, arm_frac=ARM_FRACTION, com_y_min=None):
    """Run one continuous kernel segment; returns (status, logs, end, drift)."""
    pack = stance_pack(params, stance)
    if gait is not None:
        pos_c, vel_c, th0, thf = _gait_tables(gait, stance)
    else:
        pos_c = vel_c = _ZERO_TABLE
        th = float(np.array([-1.0, -1.0, 0.0, 0.0, -0.5]) @ q0)
        th0, thf = th - 1e-9, th - 1e-9 + 0.5
    if theta_range is not None:
        th0, thf = float(theta_range[0]), float(theta_range[1])
    if com_y_min is None:
        if gait is not None and getattr(gait, "com_height_m", None):
            com_y_min = 0.6 * float(gait.com_height_m)
        else:
            com_y_min = 0.6 * float(pack.com_w @ np.cos(pack.R @ q0))

    if traj is None:
        traj_t, traj_qr, traj_qdr = _DUMMY_T, _DUMMY_TRAJ, _DUMMY_TRAJ
    else:
        traj_t, traj_qr, traj_qdr = traj.t, traj.q, traj.qd

    if hold is None:
        hold_on, hkp, hkd, hpx, hpy = 0, 0.0, 0.0, 0.0, 0.0
    else:
        hold_on, (hkp, hkd, hpx, hpy) = 1, hold

    n_max = int(np.ceil(horizon / dt)) + 4
    log_t = np.empty(n_max)
    log_q = np.empty((n_max, 5))
    log_qd = np.empty((n_max, 5))
    log_u = np.empty((n_max, 4))
    log_th = np.empty(n_max)

    n, status, t_end, q_end, qd_end, drift = K.drive(
        np.ascontiguousarray(q0, dtype=float), np.ascontiguousarray(qd0, dtype=float),
        float(t0), float(horizon), float(dt),
        pack.P, pack.inertias, pack.gw, pack.com_w, pack.pt_swing_foot, th0, thf,
        pos_c, vel_c,
        np.ascontiguousarray(joint_mode, dtype=np.int64),
        np.ascontiguousarray(kp, dtype=float), np.ascontiguousarray(kd, dtype=float),
        np.ascontiguousarray(sat, dtype=float),
        traj_t, traj_qr, traj_qdr, float(traj_anchor),
        hold_on, float(hkp), float(hkd), float(hpx), float(hpy),
        float(stop_frac), float(arm_frac), float(com_y_min),
        log_t, log_q, log_qd, log_u, log_th)

    logs = (log_t[:n].copy(), log_q[:n].copy(), log_qd[:n].copy(),
            log_u[:n].copy(), log_th[:n].copy())
    return status, logs, (t_end, q_end, qd_end), drift


def _controller_arrays(controller: ControllerSpec):
    mode = 1 if controller.mode == "time-pd" else 0
    return (np.full(4, mode, dtype=np.int64), controller.kp, controller.kd,
            controller.saturation, controller.trajectory)


_OUTCOME = {K.EVT_TIMEOUT: "timeout", K.EVT_HEEL_STRIKE: "converged", K.EVT_FELL: "fell"}


def integrate_until_event(params: ModelParams, controller: ControllerSpec,
                          x0: State, horizon: float, dt: float = DT_DEFAULT,
                          theta_range=None, apply_impact: bool = True) -> EpisodeLog:
    """Integrate until heel strike, fall, or horizon.

    Fixed-step RK4 at dt with bisection event refinement; on heel strike the
    impact map is applied and the post-impact state stored on the log.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    joint_mode, kp, kd, sat, traj = _controller_arrays(controller)
    status, logs, (t_end, q_end, qd_end), _ = _segment(
        params, x0.stance, x0.q, x0.qdot, 0.0, horizon, dt,
        gait=controller.gait, theta_range=theta_range,
        joint_mode=joint_mode, kp=kp, kd=kd, sat=sat,
        traj=traj, traj_anchor=0.0)
    events = {"t_f": t_end if status == K.EVT_HEEL_STRIKE else None,
              "t_s_minus": None, "t_s_plus": None, "hold_drift_warning": False}
    post = None
    if status == K.EVT_HEEL_STRIKE and apply_impact:
        post = impact_map(params, State(Config(q_end, x0.stance), qd_end))
    return EpisodeLog(*logs, stance=x0.stance, outcome=_OUTCOME[status],
                      events=events, post_impact=post)


def simulate_walk(params: ModelParams, gait, x0: State, n_steps: int,
                  tol: float = CONVERGE_TOL, dt: float = DT_DEFAULT,
                  keep_logs: bool = False) -> dict:
    """Chain steps under the nominal phase-PD controller.

    converged is true iff every requested step completed (no fall, no
    timeout) and some post-impact state came within `tol` of the gait fixed
    point in the weighted norm.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    controller = phase_pd(gait)
    state = x0
    distances = []
    logs = []
    reason = "completed"
    horizon = 3.0 * float(np.max(gait.step_periods))
    for _ in range(n_steps):
        log = integrate_until_event(params, controller, state, horizon, dt)
        if keep_logs:
            logs.append(log)
        if log.outcome != "converged":
            reason = log.outcome
            break
        state = log.post_impact
        fp = gait.fixed_states[int(state.stance)]
        distances.append(weighted_distance(state, fp))
    distances = np.array(distances)
    completed = reason == "completed"
    converged = bool(completed and len(distances) and distances.min() < tol)
    return {"converged": converged, "distances": distances, "reason": reason,
            "final_state": state, "logs": logs}


def _merge_policy_trajectories(knee_spec, human_spec, t_anchor_knee, t_anchor_human,
                               horizon, dt):
    """Single kernel reference table covering mixed time-pd policies.

    Returns (traj, anchor_abs). Columns 1..3 hold the human joints, column
    4 the prosthetic stance knee; unused columns are zero and never read.
    """
    knee_t = knee_spec.mode == "time-pd"
    human_t = human_spec is not None and human_spec.mode == "time-pd"
    if not knee_t and not human_t:
        return None, 0.0
    if knee_t and not human_t:
        return knee_spec.trajectory, t_anchor_knee
    if human_t and not knee_t:
        return human_spec.trajectory, t_anchor_human
    off = t_anchor_human - t_anchor_knee
    t_hi = off + max(horizon, float(human_spec.trajectory.t[-1]))
    grid = np.arange(0.0, t_hi + dt, dt)
    qh, qdh = human_spec.trajectory.sample(grid - off)
    qk, qdk = knee_spec.trajectory.sample(grid)
    qm = np.zeros((len(grid), 5))
    qdm = np.zeros((len(grid), 5))
    qm[:, 1:4] = qh[:, 1:4]
    qdm[:, 1:4] = qdh[:, 1:4]
    qm[:, 4] = qk[:, 4]
    qdm[:, 4] = qdk[:, 4]
    return TrajectoryRef(grid, qm, qdm), t_anchor_knee


def _resolve(policy, state: State, t: float) -> ControllerSpec:
    return policy(state, t) if callable(policy) else policy


def _concat_segments(parts):
    """Join segment logs; interior boundary rows keep the later controller."""
    ts, qs, qds, us, ths = [], [], [], [], []
    for i, (t, q, qd, u, th) in enumerate(parts):
        last = i == len(parts) - 1
        sl = slice(None) if last else slice(0, -1)
        ts.append(t[sl]); qs.append(q[sl]); qds.append(qd[sl]); us.append(u[sl]); ths.append(th[sl])
    return (np.concatenate(ts), np.vstack(qs), np.vstack(qds),
            np.vstack(us), np.concatenate(ths))


def toe_catch_episode(params: ModelParams, gait, knee_policy, human_policy,
                      stumble_window: tuple = HOLD_WINDOW, x0: State | None = None,
                      dt: float = DT_DEFAULT, hold_kp: float | None = None,
                      hold_kd: float | None = None, apply_impact: bool = True) -> EpisodeLog:
    """Stumble episode: nominal walking, swing-foot hold, completion, impact.

    During theta-fraction in `stumble_window` a task-space PD holds the
    swing foot at its onset position (torques added to swing hip and knee);
    afterwards human_policy finishes the step while knee_policy drives the
    prosthetic stance knee from onset through heel strike. Policies may be
    ControllerSpec instances or callables (state, t) -> ControllerSpec
    evaluated at their anchoring event (knee at onset, human at window end).
    """
    w_lo, w_hi = float(stumble_window[0]), float(stumble_window[1])
    if not (0.0 < w_lo < w_hi < 1.0):
        raise ValueError("stumble window must satisfy 0 < lo < hi < 1")
    if x0 is None:
        x0 = gait.fixed_states[int(Stance.PROSTHETIC)]
    if x0.stance != Stance.PROSTHETIC:
        raise ValueError("toe-catch episodes require prosthetic stance")

    period = float(np.max(gait.step_periods))
    nominal = phase_pd(gait)
    events = {"t_f": None, "t_s_minus": None, "t_s_plus": None,
              "hold_drift_warning": False, "i_s_minus": None, "i_s_plus": None}

    # segment A: nominal tracking up to stumble onset
    jm, kp, kd, sat, _ = _controller_arrays(nominal)
    st_a, logs_a, (t_sm, q_sm, qd_sm), _ = _segment(
        params, x0.stance, x0.q, x0.qdot, 0.0, 3.0 * period, dt,
        gait=gait, joint_mode=jm, kp=kp, kd=kd, sat=sat, stop_frac=w_lo)
    if st_a != K.EVT_FRAC_STOP:
        logs = _concat_segments([logs_a])
        return EpisodeLog(*logs, stance=x0.stance, outcome=_OUTCOME[st_a], events=events)
    events["t_s_minus"] = t_sm

    state_sm = State(Config(q_sm, x0.stance), qd_sm)
    knee = _resolve(knee_policy, state_sm, t_sm)
    hold_p = forward_kinematics(params, state_sm.config).swing_foot
    hkp = DEFAULT_HOLD_KP if hold_kp is None else float(hold_kp)
    hkd = DEFAULT_HOLD_KD if hold_kd is None else float(hold_kd)

    # segment B: stumble window with the swing-foot hold overlay
    knee_mode = 1 if knee.mode == "time-pd" else 0
    jm_b = np.array([0, 0, 0, knee_mode], dtype=np.int64)
    kp_b = np.array([*nominal.kp[:3], knee.kp[3]])
    kd_b = np.array([*nominal.kd[:3], knee.kd[3]])
    sat_b = np.array([*nominal.saturation[:3], knee.saturation[3]])
    st_b, logs_b, (t_sp, q_sp, qd_sp), drift = _segment(
        params, x0.stance, q_sm, qd_sm, t_sm, 1.5 * period, dt,
        gait=gait, joint_mode=jm_b, kp=kp_b, kd=kd_b, sat=sat_b,
        traj=knee.trajectory if knee_mode else None, traj_anchor=t_sm,
        hold=(hkp, hkd, hold_p[0], hold_p[1]), stop_frac=w_hi)
    events["hold_drift_warning"] = bool(drift > HOLD_DRIFT_WARN_M)
    events["hold_drift_m"] = float(drift)
    if st_b != K.EVT_FRAC_STOP:
        logs = _concat_segments([logs_a, logs_b])
        events["i_s_minus"] = len(logs_a[0]) - 1
        return EpisodeLog(*logs, stance=x0.stance, outcome=_OUTCOME[st_b], events=events)
    events["t_s_plus"] = t_sp

    state_sp = State(Config(q_sp, x0.stance), qd_sp)
    human = _resolve(human_policy, state_sp, t_sp)

    # segment C: step completion through heel strike
    horizon_c = 2.5 * period
    traj_c, anchor_c = _merge_policy_trajectories(knee, human, t_sm, t_sp, horizon_c, dt)
    hmode = 1 if human.mode == "time-pd" else 0
    jm_c = np.array([hmode, hmode, hmode, knee_mode], dtype=np.int64)
    kp_c = np.array([*human.kp[:3], knee.kp[3]])
    kd_c = np.array([*human.kd[:3], knee.kd[3]])
    sat_c = np.array([*human.saturation[:3], knee.saturation[3]])
    st_c, logs_c, (t_f, q_f, qd_f), _ = _segment(
        params, x0.stance, q_sp, qd_sp, t_sp, horizon_c, dt,
        gait=gait, joint_mode=jm_c, kp=kp_c, kd=kd_c, sat=sat_c,
        traj=traj_c, traj_anchor=anchor_c)

    logs = _concat_segments([logs_a, logs_b, logs_c])
    events["i_s_minus"] = len(logs_a[0]) - 1
    events["i_s_plus"] = len(logs_a[0]) + len(logs_b[0]) - 2
    post = None
    if st_c == K.EVT_HEEL_STRIKE:
        events["t_f"] = t_f
        if apply_impact:
            post = impact_map(params, State(Config(q_f, x0.stance), qd_f))
    return EpisodeLog(*logs, stance=x0.stance, outcome=_OUTCOME[st_c],
                      events=events, post_impact=post)
