"""Periodic walking gait synthesis and the gait library.

A full stride (one step per leg, two impacts) is transcribed as a
trapezoidal direct-collocation NLP and solved with trust-constr; exact
constraint Jacobians come from colored complex-step differentiation of the
closed-form dynamics. Degree-5 Bezier references in the phase variable are
decision variables tied to the nodes by a tolerance tube, the closed-loop
fixed point is located on the tracked system, and local stability is
certified from the finite-differenced stride return map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from scipy.optimize import Bounds, NonlinearConstraint, minimize
from scipy.sparse import csr_matrix

from .model import (
    B_INPUT,
    Config,
    ModelParams,
    STRIDE_PERM,
    Stance,
    State,
    THETA_COEFF,
    forward_kinematics,
    impact_velocity_map,
    mass_matrix_and_bias,
    point_position,
    stance_pack,
    theta_of,
)

N_NODES = 20
N_INT = N_NODES - 1
NX = 10
NUV = 4
NCOEF = 6
TOL_FIT = 1e-3  # node-vs-reference interpolation tolerance

DEFAULT_STEP_LENGTHS = np.round(np.linspace(0.30, 0.75, 10), 4)

# node-level inequality shaping
_CLEAR_NODES = np.arange(1, N_NODES - 1)
_MID_NODES = np.arange(8, 12)
# 1 cm mid-swing floor, tapered toward lift-off and heel strike: a floor that
# drops straight to zero lets the fitted reference skim the ground through
# late swing, where any tracking droop triggers touchdown well before the
# intended stride end.
_CLEAR_MIN = 0.01 * np.minimum(
    1.0, np.minimum(_CLEAR_NODES, N_NODES - 1 - _CLEAR_NODES) / 4.0)
_THETA_RATE_MIN = 0.05
_DESCENT_MIN = 0.05

_Q_LO = np.array([-0.5, -0.9, -0.9, -1.6, -0.9])
_Q_HI = np.array([0.5, 0.9, 0.9, 0.05, 0.05])
_QD_BOUND = 8.0
_U_BOUND = 220.0
_U_SCALE = 100.0  # torque decision variables stored in units of 100 N m
_T_BOUNDS = (0.25, 0.80)


@dataclass
class NominalGait:
    """One periodic stride: references, timing, fixed points, certificate.

    Index 0 of every phase-stacked array is the prosthetic-stance step,
    index 1 the contralateral-stance step. fixed_points rows are the
    post-impact (phase-start) states [q, qd].
    """

    step_length: float
    theta_ranges: np.ndarray   # (2, 2) [theta0, thetaf] per phase
    phase_pos: np.ndarray      # (2, 5, 6) Bezier position coefficients
    phase_vel: np.ndarray      # (2, 5, 6) Bezier velocity coefficients
    step_periods: np.ndarray   # (2,) closed-loop step durations
    fixed_points: np.ndarray   # (2, 10)
    certificate: float
    com_height_m: float
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_ranges = np.asarray(self.theta_ranges, dtype=float).reshape(2, 2)
        self.phase_pos = np.asarray(self.phase_pos, dtype=float).reshape(2, 5, 6)
        self.phase_vel = np.asarray(self.phase_vel, dtype=float).reshape(2, 5, 6)
        self.step_periods = np.asarray(self.step_periods, dtype=float).reshape(2)
        self.fixed_points = np.asarray(self.fixed_points, dtype=float).reshape(2, NX)
        if np.any(self.theta_ranges[:, 1] <= self.theta_ranges[:, 0]):
            raise ValueError("thetaf must exceed theta0")

    @property
    def theta0(self) -> float:
        return float(self.theta_ranges[0, 0])

    @property
    def thetaf(self) -> float:
        return float(self.theta_ranges[0, 1])

    @property
    def period(self) -> float:
        return float(self.step_periods.sum())

    @property
    def fixed_states(self):
        return [State(Config(self.fixed_points[i, :5].copy(), Stance(i)),
                      self.fixed_points[i, 5:].copy()) for i in range(2)]

    def to_dict(self) -> dict:
        return {
            "step_length": float(self.step_length),
            "theta_ranges": self.theta_ranges.tolist(),
            "phase_pos": self.phase_pos.tolist(),
            "phase_vel": self.phase_vel.tolist(),
            "step_periods": self.step_periods.tolist(),
            "fixed_points": self.fixed_points.tolist(),
            "certificate": float(self.certificate),
            "com_height_m": float(self.com_height_m),
            "residuals": self.residuals,
        }

    @staticmethod
    def from_dict(doc: dict) -> "NominalGait":
        return NominalGait(
            step_length=doc["step_length"],
            theta_ranges=np.array(doc["theta_ranges"]),
            phase_pos=np.array(doc["phase_pos"]),
            phase_vel=np.array(doc["phase_vel"]),
            step_periods=np.array(doc["step_periods"]),
            fixed_points=np.array(doc["fixed_points"]),
            certificate=doc["certificate"],
            com_height_m=doc["com_height_m"],
            residuals=doc.get("residuals", {}),
        )


def bezier5(coeffs, s):
    """Degree-5 Bezier with coefficient vector (6,) at s (scalar or array)."""
    s = np.asarray(s, dtype=float)
    u = 1.0 - s
    basis = np.stack([u**5, 5 * u**4 * s, 10 * u**3 * s**2,
                      10 * u**2 * s**3, 5 * u * s**4, s**5], axis=-1)
    return basis @ np.asarray(coeffs, dtype=float)


def eval_reference(gait: NominalGait, theta: float, stance: Stance = Stance.PROSTHETIC):
    """Reference joint positions and velocities at phase variable theta."""
    i = int(stance)
    th0, thf = gait.theta_ranges[i]
    s = float(np.clip((theta - th0) / (thf - th0), 0.0, 1.0))
    q_ref = np.array([bezier5(gait.phase_pos[i, j], s) for j in range(5)])
    qd_ref = np.array([bezier5(gait.phase_vel[i, j], s) for j in range(5)])
    return q_ref, qd_ref


@dataclass
class GaitLibrary:
    gaits: list

    def __post_init__(self):
        ls = self.step_lengths
        if len(ls) and np.any(np.diff(ls) <= 0):
            raise ValueError("step lengths must be strictly increasing")

    @property
    def step_lengths(self) -> np.ndarray:
        return np.array([g.step_length for g in self.gaits])

    def __len__(self):
        return len(self.gaits)

    def __getitem__(self, i) -> NominalGait:
        return self.gaits[i]

    def nearest(self, step_length: float) -> NominalGait:
        return self.gaits[int(np.argmin(np.abs(self.step_lengths - step_length)))]

    def to_dict(self) -> dict:
        return {"gaits": [g.to_dict() for g in self.gaits]}

    @staticmethod
    def from_dict(doc: dict) -> "GaitLibrary":
        return GaitLibrary([NominalGait.from_dict(g) for g in doc["gaits"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path) -> "GaitLibrary":
        with open(path) as fh:
            return GaitLibrary.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# stride collocation NLP


class _StrideNLP:
    """Two-phase stride transcription with colored complex-step Jacobians.

    Variables z = [X_P (20x10), U_P (20x4), C_P (5x6), V_P (5x6), T_P,
    X_C, U_C, C_C, V_C, T_C] where C/V are per-joint degree-5 Bezier
    coefficients for the reference position and velocity curves in
    normalized phase. Equalities: trapezoidal defects per phase,
    impact/relabel closure in both directions, terminal guard height,
    terminal step length, Bezier endpoint pinning to the node endpoint
    states. Inequalities: interior swing clearance, phase-rate floor,
    terminal descent rate, and a +-TOL_FIT tube keeping interior node
    states on the reference curves.
    """

    N_EQ = 2 * N_INT * NX + 2 * NX + 4 + 4 * NX
    _PHASE_VARS = N_NODES * NX + N_NODES * NUV + 2 * 5 * NCOEF + 1

    def __init__(self, params: ModelParams, step_length: float):
        self.params = params
        self.L = float(step_length)
        self.packs = (stance_pack(params, Stance.PROSTHETIC),
                      stance_pack(params, Stance.CONTRALATERAL))
        self.n_z = 2 * self._PHASE_VARS
        pv = self._PHASE_VARS
        nxu = N_NODES * (NX + NUV)
        self.off = {
            "XP": 0, "UP": N_NODES * NX, "CP": nxu, "VP": nxu + 5 * NCOEF,
            "TP": nxu + 10 * NCOEF,
            "XC": pv, "UC": pv + N_NODES * NX, "CC": pv + nxu,
            "VC": pv + nxu + 5 * NCOEF, "TC": pv + nxu + 10 * NCOEF,
        }
        n_cl = len(_CLEAR_NODES)
        self.n_tube = (N_NODES - 2) * NX * 2
        self.n_ineq = 2 * n_cl + 2 * N_NODES + 2 + 2 * self.n_tube
        self.n_out = self.N_EQ + self.n_ineq
        self._build_sparsity()
        self._cache_key = None
        self._cache_val = None
        self._cache_jac = None

    # -- layout helpers ------------------------------------------------------

    def unpack(self, z):
        """Physical-unit state/torque/duration views per phase."""
        XP, UP, CP, VP, TP, XC, UC, CC, VC, TC = self.unpack_full(z)
        return XP, UP, TP, XC, UC, TC

    def unpack_full(self, z):
        """All views; torques are stored scaled by 1/_U_SCALE."""
        o = self.off
        out = []
        for x, u, c, v, t in (("XP", "UP", "CP", "VP", "TP"),
                              ("XC", "UC", "CC", "VC", "TC")):
            out.append(z[o[x]:o[x] + N_NODES * NX].reshape(N_NODES, NX))
            out.append(_U_SCALE * z[o[u]:o[u] + N_NODES * NUV].reshape(N_NODES, NUV))
            out.append(z[o[c]:o[c] + 5 * NCOEF].reshape(5, NCOEF))
            out.append(z[o[v]:o[v] + 5 * NCOEF].reshape(5, NCOEF))
            out.append(z[o[t]])
        return tuple(out)

    def pack(self, XP, UP, CP, VP, TP, XC, UC, CC, VC, TC):
        return np.concatenate([XP.ravel(), UP.ravel() / _U_SCALE,
                               CP.ravel(), VP.ravel(), [TP],
                               XC.ravel(), UC.ravel() / _U_SCALE,
                               CC.ravel(), VC.ravel(), [TC]])

    # -- dynamics pieces -----------------------------------------------------

    def _xdot(self, pack, X, U):
        q, qd = X[:, :5], X[:, 5:]
        M, bias = mass_matrix_and_bias(pack, q, qd)
        rhs = U @ pack.B.T - bias
        qdd = np.linalg.solve(M, rhs[..., None])[..., 0]
        return np.concatenate([qd, qdd], axis=1)

    def _phase_defects(self, pack, X, U, T):
        xd = self._xdot(pack, X, U)
        h = T / N_INT
        # average-derivative form keeps conditioning independent of T
        D = (X[1:] - X[:-1]) / h - 0.5 * (xd[1:] + xd[:-1])
        return D.ravel()

    def _impact_closure(self, pack, x_end, x_start_next):
        q, qd = x_end[:5], x_end[5:]
        qd_plus, _, _ = impact_velocity_map(pack, q, qd)
        pred = np.concatenate([q[STRIDE_PERM], qd_plus[STRIDE_PERM]])
        return x_start_next - pred

    @staticmethod
    def _ref_pins(X, C, V):
        return np.concatenate([C[:, 0] - X[0, :5], C[:, -1] - X[-1, :5],
                               V[:, 0] - X[0, 5:], V[:, -1] - X[-1, 5:]])

    @staticmethod
    def _ref_tube(X, C, V):
        """Interleaved (TOL_FIT - d, TOL_FIT + d) rows at interior nodes."""
        th = X[:, :5] @ THETA_COEFF
        s = (th - th[0]) / (th[-1] - th[0])
        u = 1.0 - s
        basis = np.stack([u**5, 5 * u**4 * s, 10 * u**3 * s**2,
                          10 * u**2 * s**3, 5 * u * s**4, s**5], axis=1)
        d = X - np.hstack([basis @ C.T, basis @ V.T])
        inner = d[1:-1]
        return np.stack([TOL_FIT - inner, TOL_FIT + inner], axis=-1).ravel()

    def residuals(self, z):
        """Stacked [equalities, inequalities] (inequalities as g >= 0)."""
        XP, UP, CP, VP, TP, XC, UC, CC, VC, TC = self.unpack_full(z)
        pP, pC = self.packs
        eq = [self._phase_defects(pP, XP, UP, TP),
              self._phase_defects(pC, XC, UC, TC),
              self._impact_closure(pP, XP[-1], XC[0]),
              self._impact_closure(pC, XC[-1], XP[0])]
        swfP = point_position(pP, pP.pt_swing_foot, XP[:, :5])
        swfC = point_position(pC, pC.pt_swing_foot, XC[:, :5])
        eq.append(np.array([swfP[-1, 1], swfC[-1, 1],
                            swfP[-1, 0] - self.L, swfC[-1, 0] - self.L]))
        eq.append(self._ref_pins(XP, CP, VP))
        eq.append(self._ref_pins(XC, CC, VC))

        phiP = XP[:, :5] @ pP.R.T
        phiC = XC[:, :5] @ pC.R.T
        phidP = XP[:, 5:] @ pP.R.T
        phidC = XC[:, 5:] @ pC.R.T
        vyP = -np.sum(pP.pt_swing_foot * np.sin(phiP) * phidP, axis=1)
        vyC = -np.sum(pC.pt_swing_foot * np.sin(phiC) * phidC, axis=1)
        ineq = [swfP[_CLEAR_NODES, 1] - _CLEAR_MIN,
                swfC[_CLEAR_NODES, 1] - _CLEAR_MIN,
                XP[:, 5:] @ THETA_COEFF - _THETA_RATE_MIN,
                XC[:, 5:] @ THETA_COEFF - _THETA_RATE_MIN,
                np.array([-vyP[-1] - _DESCENT_MIN, -vyC[-1] - _DESCENT_MIN]),
                self._ref_tube(XP, CP, VP),
                self._ref_tube(XC, CC, VC)]
        return np.concatenate(eq + ineq)

    # -- sparsity and coloring -----------------------------------------------

    def _build_sparsity(self):
        n_cl = len(_CLEAR_NODES)
        r_defP = 0
        r_defC = N_INT * NX
        r_impPC = 2 * N_INT * NX
        r_impCP = r_impPC + NX
        r_term = r_impCP + NX           # guardP, guardC, stepP, stepC
        r_pinP = r_term + 4
        r_pinC = r_pinP + 2 * NX
        r_clrP = self.N_EQ
        r_clrC = r_clrP + n_cl
        r_thdP = r_clrC + n_cl
        r_thdC = r_thdP + N_NODES
        r_desc = r_thdC + N_NODES
        r_tubP = r_desc + 2
        r_tubC = r_tubP + self.n_tube

        rows = [[] for _ in range(self.n_z)]
        colors = np.empty(self.n_z, dtype=np.int64)
        # color bands: interior nodes by joint/parity, dedicated bands for the
        # endpoint nodes (they enter every tube row through theta0/thetaf),
        # torques, durations, then one band per Bezier coefficient index
        c_node0 = 2 * NX
        c_node19 = 3 * NX
        c_u = 4 * NX
        c_T = c_u + 2 * NUV
        c_coef = c_T + 1

        def defect_rows(base, i):
            out = []
            if i > 0:
                out.extend(range(base + (i - 1) * NX, base + i * NX))
            if i < N_INT:
                out.extend(range(base + i * NX, base + (i + 1) * NX))
            return out

        def tube_rows_at_node(base, i):
            return list(range(base + (i - 1) * 2 * NX, base + i * 2 * NX))

        clr_of = {int(n): k for k, n in enumerate(_CLEAR_NODES)}
        for phase, (xoff, uoff, coff, voff, toff, dbase) in enumerate(
                [(self.off["XP"], self.off["UP"], self.off["CP"],
                  self.off["VP"], self.off["TP"], r_defP),
                 (self.off["XC"], self.off["UC"], self.off["CC"],
                  self.off["VC"], self.off["TC"], r_defC)]):
            imp_in = r_impCP if phase == 0 else r_impPC   # rows where x[0] appears
            imp_out = r_impPC if phase == 0 else r_impCP  # rows driven by x[-1]
            r_guard = r_term + phase
            r_step = r_term + 2 + phase
            r_pin = r_pinP if phase == 0 else r_pinC
            r_clr = r_clrP if phase == 0 else r_clrC
            r_thd = r_thdP if phase == 0 else r_thdC
            r_tub = r_tubP if phase == 0 else r_tubC
            all_tube = list(range(r_tub, r_tub + self.n_tube))
            for i in range(N_NODES):
                node_rows = defect_rows(dbase, i)
                if i == 0:
                    node_rows += list(range(imp_in, imp_in + NX))
                    node_rows += all_tube
                if i == N_NODES - 1:
                    node_rows += list(range(imp_out, imp_out + NX))
                    node_rows += [r_guard, r_step, r_desc + phase]
                    node_rows += all_tube
                if 0 < i < N_NODES - 1:
                    node_rows += tube_rows_at_node(r_tub, i)
                if i in clr_of:
                    node_rows.append(r_clr + clr_of[i])
                node_rows.append(r_thd + i)
                for j in range(NX):
                    v = xoff + i * NX + j
                    extra = []
                    if i == 0:
                        extra = [r_pin + j] if j < 5 else [r_pin + 5 + j]
                    elif i == N_NODES - 1:
                        extra = [r_pin + 5 + j] if j < 5 else [r_pin + 10 + j]
                    rows[v] = np.array(node_rows + extra, dtype=np.int64)
                    if i == 0:
                        colors[v] = c_node0 + j
                    elif i == N_NODES - 1:
                        colors[v] = c_node19 + j
                    else:
                        colors[v] = j * 2 + (i % 2)
                for a in range(NUV):
                    v = uoff + i * NUV + a
                    rows[v] = np.array(defect_rows(dbase, i), dtype=np.int64)
                    colors[v] = c_u + a * 2 + (i % 2)
            for j in range(5):
                for table, base_off, pin0 in ((0, coff, r_pin + j),
                                              (1, voff, r_pin + 10 + j)):
                    curve = j if table == 0 else 5 + j
                    curve_rows = [r_tub + (i - 1) * 2 * NX + 2 * curve + b
                                  for i in range(1, N_NODES - 1) for b in (0, 1)]
                    for k in range(NCOEF):
                        v = base_off + j * NCOEF + k
                        extra = [pin0] if k == 0 else ([pin0 + 5] if k == NCOEF - 1 else [])
                        rows[v] = np.array(curve_rows + extra, dtype=np.int64)
                        colors[v] = c_coef + k
            rows[toff] = np.arange(dbase, dbase + N_INT * NX, dtype=np.int64)
            colors[toff] = c_T

        self._rows_of = rows
        self._colors = colors
        self._n_colors = c_coef + NCOEF
        # a color is valid only if its variables' declared row sets are disjoint
        for c in range(self._n_colors):
            seen = set()
            for v in np.where(colors == c)[0]:
                rs = set(int(r) for r in rows[v])
                assert not (rs & seen), f"color {c} reuses rows"
                seen |= rs

    def jacobian(self, z):
        h = 1e-30
        J = np.zeros((self.n_out, self.n_z))
        zc = z.astype(complex)
        for c in range(self._n_colors):
            idx = np.where(self._colors == c)[0]
            zp = zc.copy()
            zp[idx] += 1j * h
            g = self.residuals(zp).imag / h
            for v in idx:
                r = self._rows_of[v]
                J[r, v] = g[r]
        return J

    # -- cached interface for the solver --------------------------------------

    def _ensure(self, z, want_jac):
        key = z.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache_val = self.residuals(z.astype(float))
            self._cache_jac = None
        if want_jac and self._cache_jac is None:
            self._cache_jac = self.jacobian(z.astype(float))

    def eq_fun(self, z):
        self._ensure(z, False)
        return self._cache_val[:self.N_EQ]

    def eq_jac(self, z):
        self._ensure(z, True)
        return self._cache_jac[:self.N_EQ]

    def ineq_fun(self, z):
        self._ensure(z, False)
        return self._cache_val[self.N_EQ:]

    def ineq_jac(self, z):
        self._ensure(z, True)
        return self._cache_jac[self.N_EQ:]

    # -- objective -------------------------------------------------------------

    _TRAP_W = np.concatenate([[0.5], np.ones(N_NODES - 2), [0.5]])

    def objective(self, z):
        XP, UP, TP, XC, UC, TC = self.unpack(z)
        jP = TP / N_INT * np.sum(self._TRAP_W[:, None] * UP**2)
        jC = TC / N_INT * np.sum(self._TRAP_W[:, None] * UC**2)
        return (jP + jC) * 1e-3

    def gradient(self, z):
        XP, UP, TP, XC, UC, TC = self.unpack(z)
        g = np.zeros(self.n_z)
        o = self.off
        g[o["UP"]:o["UP"] + N_NODES * NUV] = (2e-3 * _U_SCALE * TP / N_INT) * (self._TRAP_W[:, None] * UP).ravel()
        g[o["UC"]:o["UC"] + N_NODES * NUV] = (2e-3 * _U_SCALE * TC / N_INT) * (self._TRAP_W[:, None] * UC).ravel()
        g[o["TP"]] = 1e-3 / N_INT * np.sum(self._TRAP_W[:, None] * UP**2)
        g[o["TC"]] = 1e-3 / N_INT * np.sum(self._TRAP_W[:, None] * UC**2)
        return g

    def bounds(self):
        lo = np.empty(self.n_z)
        hi = np.empty(self.n_z)
        for x, u, c, v, t in (("XP", "UP", "CP", "VP", "TP"),
                              ("XC", "UC", "CC", "VC", "TC")):
            xoff, uoff = self.off[x], self.off[u]
            coff, voff, toff = self.off[c], self.off[v], self.off[t]
            for i in range(N_NODES):
                lo[xoff + i * NX: xoff + i * NX + 5] = _Q_LO
                hi[xoff + i * NX: xoff + i * NX + 5] = _Q_HI
                lo[xoff + i * NX + 5: xoff + (i + 1) * NX] = -_QD_BOUND
                hi[xoff + i * NX + 5: xoff + (i + 1) * NX] = _QD_BOUND
            lo[uoff:uoff + N_NODES * NUV] = -_U_BOUND / _U_SCALE
            hi[uoff:uoff + N_NODES * NUV] = _U_BOUND / _U_SCALE
            for j in range(5):
                lo[coff + j * NCOEF: coff + (j + 1) * NCOEF] = _Q_LO[j] - 0.3
                hi[coff + j * NCOEF: coff + (j + 1) * NCOEF] = _Q_HI[j] + 0.3
            lo[voff:voff + 5 * NCOEF] = -(_QD_BOUND + 2.0)
            hi[voff:voff + 5 * NCOEF] = _QD_BOUND + 2.0
            lo[toff], hi[toff] = _T_BOUNDS
        return list(zip(lo, hi))


def _kinematic_guess(params: ModelParams, L: float):
    """Stance-vault / swing-mirror schedule with inverse-dynamics torques."""
    pack = stance_pack(params, Stance.PROSTHETIC)
    leg = pack.lengths[1] + pack.lengths[2]
    alpha = float(np.arcsin(min(0.95, 0.5 * L / leg)))
    T = max(0.35, L / 1.1)
    s = np.linspace(0.0, 1.0, N_NODES)

    phi_sth = alpha * (1.0 - 2.0 * s)
    knee_st = -0.08 * np.ones(N_NODES)
    phi_ssh = phi_sth + knee_st
    phi_tor = 0.03 * np.ones(N_NODES)
    phi_wth = alpha * (2.0 * s - 1.0)
    knee_sw = -0.05 - 0.55 * np.sin(np.pi * s) ** 2
    phi_wsh = phi_wth + knee_sw

    Q = np.stack([phi_tor,
                  phi_sth - phi_tor,
                  phi_wth - phi_tor,
                  knee_sw,
                  knee_st], axis=1)
    QD = np.gradient(Q, s, axis=0) / T
    X = np.hstack([Q, QD])

    QDD = np.gradient(QD, s, axis=0) / T
    U = np.zeros((N_NODES, NUV))
    for i in range(N_NODES):
        M, bias = mass_matrix_and_bias(pack, Q[i], QD[i])
        tau = M @ QDD[i] + bias
        U[i] = tau[1:5]
    U = np.clip(U, -0.8 * _U_BOUND, 0.8 * _U_BOUND)
    return X, U, T


def _fit_bezier_pinned(s_nodes, y_nodes, y0, y1):
    """Endpoint-interpolating degree-5 least-squares Bezier fit."""
    s = np.asarray(s_nodes, dtype=float)
    u = 1.0 - s
    basis = np.stack([u**5, 5 * u**4 * s, 10 * u**3 * s**2,
                      10 * u**2 * s**3, 5 * u * s**4, s**5], axis=1)
    rhs = np.asarray(y_nodes, dtype=float) - y0 * basis[:, 0] - y1 * basis[:, 5]
    mid, *_ = np.linalg.lstsq(basis[:, 1:5], rhs, rcond=None)
    return np.concatenate([[y0], mid, [y1]])


class GaitSynthesisError(RuntimeError):
    pass


def _solve_nlp(params, step_length, z0=None, maxiter=3000, rounds=3):
    nlp = _StrideNLP(params, step_length)
    if z0 is not None:
        # an already-feasible warm start is a solution; re-solving would
        # wander along the feasibility manifold to a different local optimum
        viol_eq = float(np.max(np.abs(nlp.eq_fun(z0))))
        viol_in = float(max(0.0, -np.min(nlp.ineq_fun(z0))))
        if viol_eq < 1e-7 and viol_in < 1e-7:
            res = SimpleNamespace(x=np.asarray(z0, dtype=float),
                                  fun=nlp.objective(z0),
                                  message="warm start already feasible")
            return nlp, res, True, viol_eq, viol_in
    if z0 is None:
        X, U, T = _kinematic_guess(params, step_length)
        th = X[:, :5] @ THETA_COEFF
        s = (th - th[0]) / (th[-1] - th[0])
        C = np.stack([_fit_bezier_pinned(s, X[:, j], X[0, j], X[-1, j])
                      for j in range(5)])
        V = np.stack([_fit_bezier_pinned(s, X[:, 5 + j], X[0, 5 + j], X[-1, 5 + j])
                      for j in range(5)])
        z0 = nlp.pack(X, U, C, V, T, X.copy(), U.copy(), C.copy(), V.copy(), T)
    lo = np.array([b[0] for b in nlp.bounds()])
    hi = np.array([b[1] for b in nlp.bounds()])
    constraints = [
        NonlinearConstraint(nlp.eq_fun, 0.0, 0.0,
                            jac=lambda z: csr_matrix(nlp.eq_jac(z))),
        NonlinearConstraint(nlp.ineq_fun, 0.0, np.inf,
                            jac=lambda z: csr_matrix(nlp.ineq_jac(z))),
    ]
    z = z0
    for _ in range(rounds):
        # restarting refreshes the trust region, which polishes feasibility
        res = minimize(
            nlp.objective, z, jac=nlp.gradient, method="trust-constr",
            bounds=Bounds(lo, hi), constraints=constraints,
            options={"maxiter": maxiter, "gtol": 1e-8, "xtol": 1e-12})
        z = res.x
        viol_eq = float(np.max(np.abs(nlp.eq_fun(res.x))))
        viol_in = float(max(0.0, -np.min(nlp.ineq_fun(res.x))))
        ok = viol_eq < 1e-7 and viol_in < 1e-7
        if ok:
            break
    return nlp, res, ok, viol_eq, viol_in


def _closed_loop_fixed_point(params, gait, x0: State, simulate_mod, tol=1e-7,
                             max_iter=15, warmup=12):
    """Newton iteration on the two-step stride return map under phase PD.

    The tracked orbit sits a PD steady-state offset away from the
    transcription's orbit, so the map is first iterated plainly to land
    near its own limit cycle before Newton takes over.
    """

    def stride(vec):
        st = State(Config(vec[:5].copy(), Stance.PROSTHETIC), vec[5:].copy())
        for _ in range(2):
            log = simulate_mod.integrate_until_event(
                params, simulate_mod.phase_pd(gait), st,
                horizon=3.0 * float(np.max(gait.step_periods)))
            if log.outcome != "converged":
                raise GaitSynthesisError(f"stride map left the walking domain: {log.outcome}")
            st = log.post_impact
        return st.as_vector()[:NX]

    x = x0.as_vector()[:NX].astype(float)
    for _ in range(warmup):
        fx = stride(x)
        settled = np.max(np.abs(fx - x)) < 1e-4
        x = fx
        if settled:
            break
    for _ in range(max_iter):
        fx = stride(x)
        r = fx - x
        if np.max(np.abs(r)) < tol:
            return x, float(np.max(np.abs(r)))
        J = np.empty((NX, NX))
        h = 1e-6
        for i in range(NX):
            xp = x.copy()
            xp[i] += h
            J[:, i] = (stride(xp) - fx) / h
        try:
            dx = np.linalg.solve(J - np.eye(NX), -r)
        except np.linalg.LinAlgError:
            dx = r
        # damped update, Newton on S(x) - x = 0
        x = x + np.clip(dx, -0.2, 0.2)
    fx = stride(x)
    return x, float(np.max(np.abs(fx - x)))


def _poincare_certificate(params, gait, x_star, simulate_mod, h=1e-5):
    def stride(vec):
        st = State(Config(vec[:5].copy(), Stance.PROSTHETIC), vec[5:].copy())
        for _ in range(2):
            log = simulate_mod.integrate_until_event(
                params, simulate_mod.phase_pd(gait), st,
                horizon=3.0 * float(np.max(gait.step_periods)))
            if log.outcome != "converged":
                raise GaitSynthesisError("certificate probe fell")
            st = log.post_impact
        return st.as_vector()[:NX]

    J = np.empty((NX, NX))
    for i in range(NX):
        xp = x_star.copy()
        xm = x_star.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (stride(xp) - stride(xm)) / (2 * h)
    return float(np.max(np.abs(np.linalg.eigvals(J))))


def synthesize_gait(params: ModelParams, step_length: float, z0=None,
                    verify: bool = True) -> NominalGait:
    """Solve the stride NLP and package a verified NominalGait.

    Raises GaitSynthesisError on NLP non-convergence or (when verify=True)
    an unstable certificate. A warm-started attempt that fails anywhere,
    including closed-loop verification, is retried from the cold start:
    neighboring solutions occasionally sit on branches whose tracking
    behavior is fragile even though the transcription converged.
    """
    try:
        return _synthesize_once(params, step_length, z0, verify)
    except GaitSynthesisError:
        if z0 is None:
            raise
        return _synthesize_once(params, step_length, None, verify)


def _synthesize_once(params: ModelParams, step_length: float, z0,
                     verify: bool) -> NominalGait:
    from . import simulate as simulate_mod

    nlp, res, ok, viol_eq, viol_in = _solve_nlp(params, step_length, z0=z0)
    if not ok:
        raise GaitSynthesisError(
            f"stride NLP did not converge for L={step_length}: "
            f"eq violation {viol_eq:.2e}, ineq violation {viol_in:.2e}, {res.message}")
    XP, UP, CP, VP, TP, XC, UC, CC, VC, TC = nlp.unpack_full(res.x)

    thP = theta_of(XP[:, :5])
    thC = theta_of(XC[:, :5])
    theta_ranges = np.array([[thP[0], thP[-1]], [thC[0], thC[-1]]])
    pos = np.stack([CP, CC])
    vel = np.stack([VP, VC])
    # node-vs-reference deviation, bounded by the tube constraints
    interp_err = 0.0
    for X, C, V, th in ((XP, CP, VP, thP), (XC, CC, VC, thC)):
        s = (th - th[0]) / (th[-1] - th[0])
        for j in range(5):
            interp_err = max(interp_err,
                             np.max(np.abs(bezier5(C[j], s) - X[:, j])),
                             np.max(np.abs(bezier5(V[j], s) - X[:, 5 + j])))
    interp_err = float(interp_err)

    # periodicity residual: phase-start references vs impact-relabeled
    # phase-end references of the preceding step
    resid = 0.0
    for prev, nxt in ((0, 1), (1, 0)):
        pack = nlp.packs[prev]
        q_end = np.array([bezier5(pos[prev, j], 1.0) for j in range(5)])
        qd_end = np.array([bezier5(vel[prev, j], 1.0) for j in range(5)])
        qd_plus, _, _ = impact_velocity_map(pack, q_end, qd_end)
        q_pred, qd_pred = q_end[STRIDE_PERM], qd_plus[STRIDE_PERM]
        q_next = np.array([bezier5(pos[nxt, j], 0.0) for j in range(5)])
        qd_next = np.array([bezier5(vel[nxt, j], 0.0) for j in range(5)])
        resid = max(resid, float(np.max(np.abs(q_next - q_pred))),
                    float(np.max(np.abs(qd_next - qd_pred))))

    gait = NominalGait(
        step_length=float(step_length),
        theta_ranges=theta_ranges,
        phase_pos=pos, phase_vel=vel,
        step_periods=np.array([TP, TC]),
        fixed_points=np.stack([XP[0], XC[0]]),
        certificate=np.nan,
        com_height_m=0.0,
        residuals={"periodicity": resid, "interp": interp_err,
                   "nlp_eq": viol_eq, "nlp_ineq": viol_in,
                   "objective": float(res.fun)})
    gait._z_solution = res.x  # warm-start handle for neighboring step lengths

    fk = forward_kinematics(params, Config(XP[0, :5], Stance.PROSTHETIC))
    gait.com_height_m = float(fk.com[1])

    if not verify:
        gait.certificate = np.nan
        return gait

    x_star, fp_resid = _closed_loop_fixed_point(
        params, gait, gait.fixed_states[0], simulate_mod)
    gait.fixed_points[0] = x_star
    # contralateral-phase fixed point: state after one prosthetic-stance step
    log = simulate_mod.integrate_until_event(
        params, simulate_mod.phase_pd(gait),
        State(Config(x_star[:5].copy(), Stance.PROSTHETIC), x_star[5:].copy()),
        horizon=3.0 * float(np.max(gait.step_periods)))
    if log.outcome != "converged":
        raise GaitSynthesisError("fixed-point step did not reach heel strike")
    gait.fixed_points[1] = log.post_impact.as_vector()[:NX]
    gait.step_periods[0] = log.events["t_f"]
    log2 = simulate_mod.integrate_until_event(
        params, simulate_mod.phase_pd(gait), log.post_impact,
        horizon=3.0 * float(np.max(gait.step_periods)))
    if log2.outcome != "converged":
        raise GaitSynthesisError("fixed-point second step did not reach heel strike")
    gait.step_periods[1] = log2.events["t_f"]
    gait.residuals["fixed_point"] = fp_resid

    fk = forward_kinematics(params, Config(x_star[:5], Stance.PROSTHETIC))
    gait.com_height_m = float(fk.com[1])

    rho = _poincare_certificate(params, gait, x_star, simulate_mod)
    gait.certificate = rho
    if rho >= 1.0:
        raise GaitSynthesisError(
            f"gait at L={step_length} rejected: spectral radius {rho:.3f} >= 1")

    check = simulate_mod.simulate_walk(params, gait, gait.fixed_states[0], 5)
    drift = float(np.max(check["distances"])) if len(check["distances"]) else np.inf
    gait.residuals["fixed_point_drift"] = drift
    if not check["converged"] or drift > 1e-4:
        raise GaitSynthesisError(
            f"fixed point failed closed-loop verification: drift {drift:.2e}")
    return gait


def build_library(params: ModelParams, step_lengths=None, verbose: bool = False) -> GaitLibrary:
    """Synthesize the gait library, warm-starting neighbors in ascending order."""
    if step_lengths is None:
        step_lengths = DEFAULT_STEP_LENGTHS
    gaits = []
    z_prev = None
    for L in step_lengths:
        gait = synthesize_gait(params, L, z0=z_prev)
        z_prev = getattr(gait, "_z_solution", None)
        gaits.append(gait)
        if verbose:
            print(f"gait L={L:.2f}: rho={gait.certificate:.3f} "
                  f"periods={gait.step_periods.round(3)} "
                  f"resid={gait.residuals['periodicity']:.1e}")
    return GaitLibrary(gaits)
