"""Toe-catch recovery data generation and parameterized trajectory fitting.

Pipeline: for each gait, sweep the recovery-aggressiveness parameter k over
a grid of final configurations, search the prosthetic stance-knee reference
velocity that yields a successful recovery, nondimensionalize the resulting
episodes onto the unit stumble clock, and fit per-joint velocity polynomials
q̇ᴺ(τ; k) = a¹ + a²k + a³τ + a⁴τ² + a⁵τ³ + a⁶τ⁴ on each clock segment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import simulate
from .model import ModelParams, Stance, State, point_position, stance_pack
from .gaits import NominalGait, eval_reference
from .simulate import (
    DT_DEFAULT,
    HOLD_WINDOW,
    EpisodeLog,
    TrajectoryRef,
    time_pd,
    toe_catch_episode,
)

N_CONFIGS = 10
BOS_SPAN = (0.7, 1.3)          # base-of-support range, in units of step length
KNEE_RANGE = (-0.9, 0.05)      # prosthetic knee travel for reference ramps
COMPLETION_STRETCH = 1.5       # slow-down factor for the recovery completion
DISP_WEIGHT = 10.0             # weight of displacement rows in the fit
SEARCH_RADII = (0.0, 0.3, 0.6, 1.0, 1.5, 2.2, 3.0)
SEARCH_EDGE_TOL = 0.02         # rad/s resolution of the success-interval edges
WALK_CHECK_STEPS = 10
VEL_RMS_BUDGET = 0.05          # rad per unit tau, held-out trials
POS_BUDGET_FRAC = 0.02         # of step length, held-out final positions


class NoRecoveryFound(RuntimeError):
    """No stance-knee velocity in the search bounds recovers the stumble."""


class RecoveryFitError(RuntimeError):
    pass


@dataclass
class RecoveryTrial:
    step_index: int
    config_index: int          # 1..N_CONFIGS
    k: float
    knee_velocity: float
    log: EpisodeLog
    success: bool
    bracket: tuple | None = None


@dataclass
class NormalizedTrajectory:
    """Joint trajectories on the unit stumble clock.

    Velocities are rad per unit tau: scaled by (segment duration / 0.5) so
    integrating over tau reproduces real displacements. Positions are offsets
    from the onset configuration, so qtilde starts at zero. The two clock
    segments may disagree in normalized velocity at tau = 0.5.
    """

    tau: np.ndarray            # (n,)
    qdot_n: np.ndarray         # (n, 5)
    qtilde: np.ndarray         # (n, 5)
    durations: tuple           # (T1, T2) real segment durations [s]
    q0: np.ndarray             # (5,) onset configuration
    k: float | None = None

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        self.qdot_n = np.asarray(self.qdot_n, dtype=float)
        self.qtilde = np.asarray(self.qtilde, dtype=float)
        self.q0 = np.asarray(self.q0, dtype=float)
        n = len(self.tau)
        if self.qdot_n.shape != (n, 5) or self.qtilde.shape != (n, 5):
            raise ValueError("trajectory arrays must be (n,), (n,5), (n,5)")
        if np.any(np.diff(self.tau) <= 0):
            raise ValueError("tau must be strictly increasing")
        if self.tau[0] < -1e-12 or self.tau[-1] > 1.0 + 1e-12:
            raise ValueError("tau must lie in [0, 1]")


@dataclass
class RecoveryEntry:
    """Fitted velocity-polynomial set for one step length."""

    step_length: float
    coeffs: np.ndarray         # (5 joints, 2 segments, 6 coefficients)
    T1_ref: float              # median stumble-segment duration [s]
    T2_ref: float              # median completion-segment duration [s]
    q0: np.ndarray             # (5,) shared onset configuration
    qd0: np.ndarray            # (5,) onset joint velocities
    k_fit: np.ndarray
    k_holdout: np.ndarray
    knee_velocities: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "step_length": float(self.step_length),
            "coeffs": self.coeffs.tolist(),
            "T1_ref": float(self.T1_ref),
            "T2_ref": float(self.T2_ref),
            "q0": self.q0.tolist(),
            "qd0": self.qd0.tolist(),
            "k_fit": np.asarray(self.k_fit, dtype=float).tolist(),
            "k_holdout": np.asarray(self.k_holdout, dtype=float).tolist(),
            "knee_velocities": {str(i): v for i, v in self.knee_velocities.items()},
            "residuals": self.residuals,
        }

    @staticmethod
    def from_dict(doc: dict) -> "RecoveryEntry":
        return RecoveryEntry(
            step_length=doc["step_length"],
            coeffs=np.array(doc["coeffs"]),
            T1_ref=doc["T1_ref"], T2_ref=doc["T2_ref"],
            q0=np.array(doc["q0"]), qd0=np.array(doc["qd0"]),
            k_fit=np.array(doc["k_fit"]), k_holdout=np.array(doc["k_holdout"]),
            knee_velocities={int(i): v for i, v in doc.get("knee_velocities", {}).items()},
            residuals=doc.get("residuals", {}))


@dataclass
class RecoveryPolyLib:
    entries: list

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> RecoveryEntry:
        return self.entries[i]

    @property
    def step_lengths(self) -> np.ndarray:
        return np.array([e.step_length for e in self.entries])

    def entry_for(self, step_length: float) -> RecoveryEntry:
        return self.entries[int(np.argmin(np.abs(self.step_lengths - step_length)))]

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries]}

    @staticmethod
    def from_dict(doc: dict) -> "RecoveryPolyLib":
        return RecoveryPolyLib([RecoveryEntry.from_dict(e) for e in doc["entries"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path) -> "RecoveryPolyLib":
        with open(path) as fh:
            return RecoveryPolyLib.from_dict(json.load(fh))


def config_k(config_index: int, n_configs: int = N_CONFIGS) -> float:
    """k value of a 1-based final-configuration index."""
    if not 1 <= config_index <= n_configs:
        raise ValueError("config index out of range")
    return (config_index - 1) / (n_configs - 1)


# ---------------------------------------------------------------------------
# recovery policies


def final_config(params: ModelParams, gait: NominalGait, k: float) -> np.ndarray:
    """Pre-impact target configuration whose base of support scales with k.

    The swing hip and knee are re-solved from the gait's end configuration so
    the swing foot lands on the ground at lerp(BOS_SPAN, k) * step length.
    """
    if not 0.0 <= k <= 1.0:
        raise ValueError("k must lie in [0, 1]")
    pack = stance_pack(params, Stance.PROSTHETIC)
    q = np.array([c[-1] for c in gait.phase_pos[0]])
    bos_target = (BOS_SPAN[0] + (BOS_SPAN[1] - BOS_SPAN[0]) * k) * gait.step_length

    def newton_to(bos):
        nonlocal q
        for _ in range(60):
            p = point_position(pack, pack.pt_swing_foot, q)
            r = np.array([p[0] - bos, p[1]])
            if np.max(np.abs(r)) < 1e-11:
                return
            J = np.empty((2, 2))
            h = 1e-7
            for c, j in enumerate((2, 3)):
                qp = q.copy()
                qp[j] += h
                J[:, c] = (point_position(pack, pack.pt_swing_foot, qp)
                           - p) / h
            dq = np.linalg.solve(J, -r)
            q[2] += np.clip(dq[0], -0.3, 0.3)
            q[3] += np.clip(dq[1], -0.3, 0.3)
        raise RecoveryFitError(f"final-configuration solve stalled at bos={bos:.3f}")

    # continuation from the nominal step length outward
    bos0 = gait.step_length
    for bos in np.linspace(bos0, bos_target, max(2, int(abs(bos_target - bos0) / 0.04) + 2)):
        newton_to(bos)
    return q


def nominal_knee_velocity(gait: NominalGait, frac: float = HOLD_WINDOW[0]) -> float:
    """Reference stance-knee velocity at a theta-fraction of the prosthetic phase."""
    th0, thf = gait.theta_ranges[int(Stance.PROSTHETIC)]
    _, qd_ref = eval_reference(gait, th0 + frac * (thf - th0), Stance.PROSTHETIC)
    return float(qd_ref[4])


def knee_ramp_policy(gait: NominalGait, velocity: float, kp=None, kd=None):
    """Stance-knee reference: constant-velocity ramp from the onset angle.

    Returned callable resolves at stumble onset; the ramp saturates at the
    knee travel limits and covers the rest of the episode.
    """
    horizon = 4.0 * float(np.max(gait.step_periods))

    def policy(state: State, t: float):
        q0 = float(state.q[4])
        v = float(velocity)
        ts, qs, vs = [0.0], [q0], [v]
        if abs(v) > 1e-9:
            lim = KNEE_RANGE[1] if v > 0 else KNEE_RANGE[0]
            t_hit = (lim - q0) / v
            if 0.0 < t_hit < horizon:
                ts += [t_hit, min(t_hit + 0.01, horizon * 0.999), horizon]
                qs += [lim, lim, lim]
                vs += [v, 0.0, 0.0]
            else:
                ts.append(horizon)
                qs.append(q0 + v * horizon)
                vs.append(v)
        else:
            ts.append(horizon)
            qs.append(q0)
            vs.append(0.0)
        qarr = np.zeros((len(ts), 5))
        qdarr = np.zeros((len(ts), 5))
        qarr[:, 4] = qs
        qdarr[:, 4] = vs
        return time_pd(TrajectoryRef(np.array(ts), qarr, qdarr), kp=kp, kd=kd)

    return policy


def completion_policy(params: ModelParams, gait: NominalGait, k: float,
                      stretch: float = COMPLETION_STRETCH, kp=None, kd=None):
    """Human step completion: cubic ease-in to the k-indexed final configuration.

    Resolved at the stumble-window end; drives the human hips and swing knee
    from the held posture to final_config(k) with the gait's pre-impact
    approach velocities, over a stretched remainder-of-step duration.
    """
    q_goal = final_config(params, gait, k)
    th0, thf = gait.theta_ranges[int(Stance.PROSTHETIC)]
    _, qd_goal = eval_reference(gait, thf, Stance.PROSTHETIC)
    duration = stretch * (1.0 - HOLD_WINDOW[1]) * float(gait.step_periods[0])

    def policy(state: State, t: float):
        ts = np.linspace(0.0, duration, max(8, int(duration / 0.005) + 1))
        s = ts / duration
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        g00 = 6 * s**2 - 6 * s
        g10 = 3 * s**2 - 4 * s + 1
        g01 = 6 * s - 6 * s**2
        g11 = 3 * s**2 - 2 * s
        qarr = np.zeros((len(ts), 5))
        qdarr = np.zeros((len(ts), 5))
        for j in (1, 2, 3):
            p0, v0 = float(state.q[j]), float(state.qdot[j])
            p1, v1 = float(q_goal[j]), float(qd_goal[j])
            qarr[:, j] = (h00 * p0 + h10 * duration * v0
                          + h01 * p1 + h11 * duration * v1)
            qdarr[:, j] = (g00 * p0 + g01 * p1) / duration + g10 * v0 + g11 * v1
        return time_pd(TrajectoryRef(ts, qarr, qdarr), kp=kp, kd=kd)

    return policy


# ---------------------------------------------------------------------------
# trial generation


def run_trial(params: ModelParams, gait: NominalGait, k: float, knee_velocity: float,
              step_index: int = -1, config_index: int = 0,
              walk_steps: int = WALK_CHECK_STEPS, dt: float = DT_DEFAULT) -> RecoveryTrial:
    """One stumble episode plus the post-recovery walking check."""
    log = toe_catch_episode(
        params, gait,
        knee_policy=knee_ramp_policy(gait, knee_velocity),
        human_policy=completion_policy(params, gait, k),
        dt=dt)
    success = log.outcome == "converged" and log.post_impact is not None
    if success:
        walk = simulate.simulate_walk(params, gait, log.post_impact, walk_steps, dt=dt)
        success = walk["converged"]
    return RecoveryTrial(step_index=step_index, config_index=config_index, k=k,
                         knee_velocity=float(knee_velocity), log=log, success=success)


def search_knee_velocity(params: ModelParams, gait: NominalGait, k: float,
                         step_index: int = -1, config_index: int = 0,
                         radii=SEARCH_RADII, edge_tol: float = SEARCH_EDGE_TOL,
                         dt: float = DT_DEFAULT) -> dict:
    """Find a stance-knee velocity scalar that recovers the stumble.

    Expanding grid around the nominal knee velocity, then bisection to the
    success-interval edges; returns the interval midpoint re-simulated.
    Raises NoRecoveryFound when the bounded grid has no success.
    """
    v0 = nominal_knee_velocity(gait)
    tried = {}

    def probe(v) -> RecoveryTrial:
        key = round(float(v), 9)
        if key not in tried:
            tried[key] = run_trial(params, gait, k, v, step_index, config_index, dt=dt)
        return tried[key]

    candidates = [v0]
    for r in radii[1:]:
        candidates += [v0 + r, v0 - r]
    hit = None
    for v in candidates:
        if probe(v).success:
            hit = float(v)
            break
    if hit is None:
        raise NoRecoveryFound(
            f"no recovery in [{v0 - radii[-1]:.2f}, {v0 + radii[-1]:.2f}] rad/s for k={k:.3f}")

    step = max(r for r in radii if r > 0) / len(radii)
    lo_fail, hi_fail = None, None
    lo_ok, hi_ok = hit, hit
    bound_lo, bound_hi = v0 - radii[-1], v0 + radii[-1]
    while lo_fail is None and lo_ok - step >= bound_lo - 1e-9:
        v = lo_ok - step
        if probe(v).success:
            lo_ok = v
        else:
            lo_fail = v
    while hi_fail is None and hi_ok + step <= bound_hi + 1e-9:
        v = hi_ok + step
        if probe(v).success:
            hi_ok = v
        else:
            hi_fail = v

    def bisect(v_ok, v_bad):
        if v_bad is None:
            return v_ok
        while abs(v_bad - v_ok) > edge_tol:
            mid = 0.5 * (v_ok + v_bad)
            if probe(mid).success:
                v_ok = mid
            else:
                v_bad = mid
        return v_ok

    lo_edge = bisect(lo_ok, lo_fail)
    hi_edge = bisect(hi_ok, hi_fail)
    v_star = 0.5 * (lo_edge + hi_edge)
    trial = probe(v_star)
    if not trial.success:
        # non-contiguous success region; fall back to the confirmed hit
        v_star = hit
        trial = probe(hit)
    trial.bracket = (float(lo_edge), float(hi_edge))
    return {"velocity": float(v_star), "trial": trial}


def generate_step_trials(params: ModelParams, gait: NominalGait, step_index: int,
                         n_configs: int = N_CONFIGS, dt: float = DT_DEFAULT,
                         verbose: bool = False) -> list:
    """Sweep the final-configuration grid; empty cells carry success=False."""
    trials = []
    for idx in range(1, n_configs + 1):
        k = config_k(idx, n_configs)
        try:
            out = search_knee_velocity(params, gait, k, step_index, idx, dt=dt)
            trials.append(out["trial"])
        except NoRecoveryFound:
            trials.append(RecoveryTrial(step_index, idx, k, np.nan, None, False))
        if verbose:
            t = trials[-1]
            print(f"  config {idx}/{n_configs} k={k:.2f}: "
                  f"{'ok v=%.3f' % t.knee_velocity if t.success else 'no recovery'}",
                  flush=True)
    return trials


# ---------------------------------------------------------------------------
# nondimensionalization


def nondimensionalize(log: EpisodeLog, dt: float = DT_DEFAULT) -> NormalizedTrajectory:
    """Map a stumble episode onto the unit clock (Def. of the two-segment tau).

    Segment [t_s-, t_s+] maps to [0, 0.5], (t_s+, t_f] to (0.5, 1];
    velocities are scaled so displacement is preserved under the clock.
    """
    ev = log.events
    t_sm, t_sp, t_f = ev.get("t_s_minus"), ev.get("t_s_plus"), ev.get("t_f")
    if t_sm is None or t_sp is None or t_f is None:
        raise ValueError("episode lacks stumble/heel-strike events")
    if not t_sm < t_sp < t_f:
        raise ValueError("event times must be ordered t_s- < t_s+ < t_f")
    T1, T2 = t_sp - t_sm, t_f - t_sp
    if T1 < 10 * dt or T2 < 10 * dt:
        raise ValueError(f"degenerate stumble segment: T1={T1:.4f}s T2={T2:.4f}s")

    i_sm, i_sp = ev["i_s_minus"], ev["i_s_plus"]
    q0 = log.q[i_sm].copy()

    t1 = log.t[i_sm:i_sp + 1]
    tau1 = 0.5 * (t1 - t_sm) / T1
    qd1 = log.qd[i_sm:i_sp + 1] * (T1 / 0.5)
    qt1 = log.q[i_sm:i_sp + 1] - q0

    t2 = log.t[i_sp + 1:]
    tau2 = 0.5 + 0.5 * (t2 - t_sp) / T2
    qd2 = log.qd[i_sp + 1:] * (T2 / 0.5)
    qt2 = log.q[i_sp + 1:] - q0

    return NormalizedTrajectory(
        tau=np.concatenate([tau1, tau2]),
        qdot_n=np.vstack([qd1, qd2]),
        qtilde=np.vstack([qt1, qt2]),
        durations=(float(T1), float(T2)),
        q0=q0)


# ---------------------------------------------------------------------------
# polynomial fitting


def _vel_basis(tau, k):
    tau = np.asarray(tau, dtype=float)
    one = np.ones_like(tau)
    return np.stack([one, k * one, tau, tau**2, tau**3, tau**4], axis=-1)


def _disp_basis(tau_a, tau_b, k):
    """Integral of the velocity basis over [tau_a, tau_b]."""
    def anti(t):
        return np.array([t, k * t, t**2 / 2, t**3 / 3, t**4 / 4, t**5 / 5])
    return anti(tau_b) - anti(tau_a)


def _segment_masks(tau):
    return tau <= 0.5 + 1e-12, tau > 0.5 + 1e-12


def fit_recovery_polynomials(normalized: list, ks: list, step_length: float,
                             fit_stride: int = 3) -> RecoveryEntry:
    """Least-squares velocity-polynomial fit with held-out validation.

    Fitting set is every `fit_stride`-th trial by k order; the remainder is
    held out. Displacement rows (integral of the basis matching observed
    segment displacements) enter at DISP_WEIGHT.
    """
    order = np.argsort(ks)
    trajs = [normalized[i] for i in order]
    kvals = np.array([ks[i] for i in order], dtype=float)
    idx_fit = list(range(0, len(trajs), fit_stride))
    idx_hold = [i for i in range(len(trajs)) if i not in idx_fit]
    k_fit = kvals[idx_fit]
    if len(np.unique(k_fit)) < 4:
        raise RecoveryFitError("need at least 4 distinct k values to fit")

    coeffs = np.zeros((5, 2, 6))
    for j in range(5):
        for seg in range(2):
            rows, targets = [], []
            for i in idx_fit:
                tr = trajs[i]
                m1, m2 = _segment_masks(tr.tau)
                mask = m1 if seg == 0 else m2
                rows.append(_vel_basis(tr.tau[mask], kvals[i]))
                targets.append(tr.qdot_n[mask, j])
                # displacement row ties integrated velocity to real travel
                t_lo, t_hi = (0.0, 0.5) if seg == 0 else (0.5, 1.0)
                d_lo = np.interp(t_lo, tr.tau, tr.qtilde[:, j])
                d_hi = np.interp(t_hi, tr.tau, tr.qtilde[:, j])
                rows.append(DISP_WEIGHT * _disp_basis(t_lo, t_hi, kvals[i])[None, :])
                targets.append([DISP_WEIGHT * (d_hi - d_lo)])
            A = np.vstack(rows)
            y = np.concatenate(targets)
            sol, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
            if rank < 6:
                raise RecoveryFitError(
                    f"rank-deficient fit for joint {j}, segment {seg}")
            coeffs[j, seg] = sol

    def vel_rms(indices):
        worst = np.zeros(5)
        for i in indices:
            tr = trajs[i]
            m1, m2 = _segment_masks(tr.tau)
            for j in range(5):
                pred = np.where(
                    m1,
                    _vel_basis(tr.tau, kvals[i]) @ coeffs[j, 0],
                    _vel_basis(tr.tau, kvals[i]) @ coeffs[j, 1])
                err = pred - tr.qdot_n[:, j]
                worst[j] = max(worst[j], float(np.sqrt(np.mean(err**2))))
        return worst

    def pos_err(indices):
        worst = np.zeros(5)
        for i in indices:
            tr = trajs[i]
            for j in range(5):
                pred = (_disp_basis(0.0, 0.5, kvals[i]) @ coeffs[j, 0]
                        + _disp_basis(0.5, 1.0, kvals[i]) @ coeffs[j, 1])
                true = np.interp(1.0, tr.tau, tr.qtilde[:, j])
                worst[j] = max(worst[j], abs(pred - true))
        return worst

    q0 = trajs[0].q0
    durs = np.array([tr.durations for tr in trajs])
    entry = RecoveryEntry(
        step_length=float(step_length),
        coeffs=coeffs,
        T1_ref=float(np.median(durs[:, 0])),
        T2_ref=float(np.median(durs[:, 1])),
        q0=q0.copy(),
        qd0=np.zeros(5),
        k_fit=k_fit,
        k_holdout=kvals[idx_hold],
        residuals={
            "fit_vel_rms": vel_rms(idx_fit).tolist(),
            "holdout_vel_rms": vel_rms(idx_hold).tolist(),
            "fit_pos_err": pos_err(idx_fit).tolist(),
            "holdout_pos_err": pos_err(idx_hold).tolist(),
        })
    return entry


# ---------------------------------------------------------------------------
# closed-form evaluation


@dataclass
class ParamTrajectory:
    """Closed-form q̃(τ; k) and q̇ᴺ(τ; k) for one joint at a fixed k."""

    coeffs: np.ndarray         # (2, 6)
    k: float
    q0_joint: float
    end_pos_affine: tuple      # (offset, slope): qtilde(1; k) = off + slope*k
    end_vel_affine: tuple

    def qdot_n(self, tau):
        tau = np.asarray(tau, dtype=float)
        m1, _ = _segment_masks(tau)
        v1 = _vel_basis(tau, self.k) @ self.coeffs[0]
        v2 = _vel_basis(tau, self.k) @ self.coeffs[1]
        return np.where(m1, v1, v2)

    def qtilde(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.empty(tau.shape)
        m1, m2 = _segment_masks(tau)
        for t_i in np.ndindex(tau.shape):
            t = tau[t_i]
            if m1[t_i]:
                out[t_i] = _disp_basis(0.0, t, self.k) @ self.coeffs[0]
            else:
                out[t_i] = (_disp_basis(0.0, 0.5, self.k) @ self.coeffs[0]
                            + _disp_basis(0.5, t, self.k) @ self.coeffs[1])
        return out

    def q(self, tau):
        return self.q0_joint + self.qtilde(tau)

    @property
    def end_state(self):
        off_p, slope_p = self.end_pos_affine
        off_v, slope_v = self.end_vel_affine
        return (self.q0_joint + off_p + slope_p * self.k, off_v + slope_v * self.k)


def eval_param_trajectory(lib, step_index: int, joint: int, k: float,
                          q0_joint: float | None = None) -> ParamTrajectory:
    """Closed forms for one joint; τ=1 position/velocity exactly affine in k.

    The k-dependence is degree 1 in the velocity basis, so integration keeps
    it affine; offset/slope pairs are returned for reach-set use.
    """
    if not 0.0 <= k <= 1.0:
        raise ValueError("k must lie in [0, 1]")
    entry = lib[step_index] if not isinstance(lib, RecoveryEntry) else lib
    c = entry.coeffs[joint]
    if q0_joint is None:
        q0_joint = float(entry.q0[joint])

    # qtilde(1) = I1(k) @ a + I2(k) @ b with the k-column linear in k
    i1_off = _disp_basis(0.0, 0.5, 0.0)
    i2_off = _disp_basis(0.5, 1.0, 0.0)
    i1_k = _disp_basis(0.0, 0.5, 1.0) - i1_off
    i2_k = _disp_basis(0.5, 1.0, 1.0) - i2_off
    pos_off = float(i1_off @ c[0] + i2_off @ c[1])
    pos_slope = float(i1_k @ c[0] + i2_k @ c[1])

    v_off = float(_vel_basis(np.array([1.0]), 0.0)[0] @ c[1])
    v_slope = float(c[1, 1])

    return ParamTrajectory(coeffs=c, k=float(k), q0_joint=float(q0_joint),
                           end_pos_affine=(pos_off, pos_slope),
                           end_vel_affine=(v_off, v_slope))


# ---------------------------------------------------------------------------
# library assembly


def build_recovery_entry(params: ModelParams, gait: NominalGait, step_index: int,
                         n_configs: int = N_CONFIGS, dt: float = DT_DEFAULT,
                         verbose: bool = False) -> tuple:
    """Trials, fit, and metadata for one step length."""
    trials = generate_step_trials(params, gait, step_index, n_configs, dt, verbose)
    good = [t for t in trials if t.success]
    if len(good) < 4:
        raise RecoveryFitError(
            f"only {len(good)} successful trials at L={gait.step_length}")
    normalized = [nondimensionalize(t.log, dt) for t in good]
    ks = [t.k for t in good]
    entry = fit_recovery_polynomials(normalized, ks, gait.step_length)
    entry.qd0 = good[0].log.qd[good[0].log.events["i_s_minus"]].copy()
    entry.knee_velocities = {
        t.config_index: (float(t.knee_velocity) if t.success else None)
        for t in trials}
    return entry, trials


def build_recovery_library(params: ModelParams, gait_library,
                           n_configs: int = N_CONFIGS, dt: float = DT_DEFAULT,
                           verbose: bool = False) -> RecoveryPolyLib:
    entries = []
    for i, gait in enumerate(gait_library):
        if verbose:
            print(f"recovery data for L={gait.step_length:.2f} "
                  f"({i + 1}/{len(gait_library)})", flush=True)
        entry, _ = build_recovery_entry(params, gait, i, n_configs, dt, verbose)
        entries.append(entry)
    return RecoveryPolyLib(entries)


# ---------------------------------------------------------------------------
# trial documents: the handoff between data generation and fitting


def step_trials_doc(step_index: int, gait: NominalGait, trials: list,
                    dt: float = DT_DEFAULT) -> dict:
    """Serializable record of one step length's trial grid.

    Successful trials carry their normalized trajectories; failures keep
    only the grid bookkeeping so the document reflects the whole sweep.
    """
    doc = {"step_index": int(step_index),
           "step_length": float(gait.step_length),
           "dt": float(dt), "trials": []}
    for t in trials:
        rec = {"config_index": int(t.config_index), "k": float(t.k),
               "knee_velocity": (None if not np.isfinite(t.knee_velocity)
                                 else float(t.knee_velocity)),
               "success": bool(t.success)}
        if t.success:
            norm = nondimensionalize(t.log, dt)
            i_sm = t.log.events["i_s_minus"]
            rec["normalized"] = {
                "tau": norm.tau.tolist(),
                "qdot_n": norm.qdot_n.tolist(),
                "qtilde": norm.qtilde.tolist(),
                "durations": [float(d) for d in norm.durations],
                "q0": norm.q0.tolist(),
                "qd0": t.log.qd[i_sm].tolist()}
        doc["trials"].append(rec)
    return doc


def entry_from_trials_doc(doc: dict) -> RecoveryEntry:
    """Fit one library entry from a saved trial document."""
    normalized, ks, qd0 = [], [], None
    knee_velocities = {}
    for rec in doc["trials"]:
        knee_velocities[rec["config_index"]] = (
            rec["knee_velocity"] if rec["success"] else None)
        if not rec["success"]:
            continue
        n = rec["normalized"]
        normalized.append(NormalizedTrajectory(
            tau=np.array(n["tau"]), qdot_n=np.array(n["qdot_n"]),
            qtilde=np.array(n["qtilde"]), durations=tuple(n["durations"]),
            q0=np.array(n["q0"]), k=rec["k"]))
        ks.append(rec["k"])
        if qd0 is None:
            qd0 = np.array(n["qd0"], dtype=float)
    if len(normalized) < 4:
        raise RecoveryFitError(
            f"only {len(normalized)} successful trials in document for "
            f"L={doc['step_length']}")
    entry = fit_recovery_polynomials(normalized, ks, doc["step_length"])
    entry.qd0 = qd0
    entry.knee_velocities = knee_velocities
    return entry
