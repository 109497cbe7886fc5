"""Parameterized heel-strike reachable sets with slice/buffer structure.

Per joint, the tau=1 angle is exactly affine in its trajectory parameter,
so each joint contributes a circular arc enclosed by a sliceable zonotope:
a first-order generator tagged with the parameter plus plain generators
bounding the arc curvature and the polynomial fit budget. Chain positions
compose these rotations with interval absorption of the nonlinear cross
terms, keeping every parameter-tagged generator exact and sliceable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .geometry import Zonotope2
from .model import Config, ModelParams, Stance, stance_pack
from .recovery import eval_param_trajectory
from .targets import HUMAN_JOINTS, PROSTHETIC_JOINT, joint_parameter

PARAM_KH = "k_h"
PARAM_KP = "k_p"

N_SUBINTERVALS = 10
POS_BUDGET_FRAC = 0.02      # rad of per-joint tau=1 position enclosure per m of step length
VEL_BUDGET = 0.05           # rad/unit-tau of per-joint velocity enclosure


def subinterval(i: int, n: int = N_SUBINTERVALS):
    """The i-th of n uniform subintervals of [0, 1]."""
    if not 0 <= i < n:
        raise ValueError("subinterval index out of range")
    return (i / n, (i + 1) / n)


class ReachError(RuntimeError):
    pass


@dataclass
class SliceableZonotope:
    """Zonotope with parameter-tagged generators over normalized parameters.

    Tagged generators carry exact affine dependence: the set point moves by
    generator * xi as the parameter crosses its subinterval (xi in [-1, 1]).
    Slicing folds that shift into the center and removes the generator.
    """

    center: np.ndarray
    plain: np.ndarray                      # (n, m)
    sliceable: list = field(default_factory=list)  # [(param, (n,) vector)]

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        n = len(self.center)
        P = np.asarray(self.plain, dtype=float)
        self.plain = P.reshape(n, -1) if P.size else np.zeros((n, 0))
        self.sliceable = [(p, np.atleast_1d(np.asarray(g, dtype=float)))
                          for p, g in self.sliceable]

    @property
    def dim(self) -> int:
        return len(self.center)

    def tagged(self, param: str) -> np.ndarray:
        """Sum of generators carrying this parameter tag."""
        out = np.zeros(self.dim)
        for p, g in self.sliceable:
            if p == param:
                out = out + g
        return out

    def slice(self, param: str, xi: float) -> "SliceableZonotope":
        if not -1.0 - 1e-12 <= xi <= 1.0 + 1e-12:
            raise ValueError("normalized slice value must lie in [-1, 1]")
        keep = [(p, g) for p, g in self.sliceable if p != param]
        shift = self.tagged(param) * xi
        return SliceableZonotope(self.center + shift, self.plain.copy(), keep)

    def drop_to_plain(self, param: str) -> "SliceableZonotope":
        """Absorb a parameter's generators as plain ones (covers its range)."""
        keep = [(p, g) for p, g in self.sliceable if p != param]
        absorbed = [g for p, g in self.sliceable if p == param]
        plain = np.hstack([self.plain] + [g[:, None] for g in absorbed]) \
            if absorbed else self.plain.copy()
        return SliceableZonotope(self.center.copy(), plain, keep)

    def all_generators(self) -> np.ndarray:
        gens = [self.plain] + [g[:, None] for _, g in self.sliceable]
        return np.hstack(gens)

    def interval(self):
        """Axis-aligned bounds over all generators."""
        r = np.sum(np.abs(self.all_generators()), axis=1)
        return self.center - r, self.center + r

    def support(self, d) -> float:
        d = np.asarray(d, dtype=float)
        return float(self.center @ d + np.sum(np.abs(self.all_generators().T @ d)))

    def contains(self, x, tol: float = 1e-9):
        """(contained, infinity-norm load) via the membership LP."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        G = self.all_generators()
        m = G.shape[1]
        if m == 0:
            load = float(np.max(np.abs(x - self.center)))
            return load <= tol, load
        # min t  s.t.  G xi = x - c,  -t <= xi_i <= t
        c_obj = np.zeros(m + 1)
        c_obj[-1] = 1.0
        A_ub = np.zeros((2 * m, m + 1))
        A_ub[:m, :m] = np.eye(m)
        A_ub[m:, :m] = -np.eye(m)
        A_ub[:, -1] = -1.0
        A_eq = np.hstack([G, np.zeros((self.dim, 1))])
        res = linprog(c_obj, A_ub=A_ub, b_ub=np.zeros(2 * m),
                      A_eq=A_eq, b_eq=x - self.center,
                      bounds=[(None, None)] * m + [(0.0, None)], method="highs")
        if not res.success:
            return False, np.inf
        load = float(res.fun)
        return load <= 1.0 + tol, load

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "plain": self.plain.tolist(),
                "sliceable": [[p, g.tolist()] for p, g in self.sliceable]}

    @staticmethod
    def from_dict(doc: dict) -> "SliceableZonotope":
        return SliceableZonotope(np.array(doc["center"]),
                                 np.array(doc["plain"]),
                                 [(p, np.array(g)) for p, g in doc["sliceable"]])


class _Aff:
    """Scalar affine form c + sum(lin[p] * xi_p) + [-err, err], |xi_p| <= 1."""

    __slots__ = ("c", "lin", "err")

    def __init__(self, c=0.0, lin=None, err=0.0):
        self.c = float(c)
        self.lin = dict(lin or {})
        self.err = float(err)

    def radius(self) -> float:
        return sum(abs(v) for v in self.lin.values()) + self.err

    def __add__(self, other):
        if not isinstance(other, _Aff):
            return _Aff(self.c + other, self.lin, self.err)
        lin = dict(self.lin)
        for p, v in other.lin.items():
            lin[p] = lin.get(p, 0.0) + v
        return _Aff(self.c + other.c, lin, self.err + other.err)

    def __neg__(self):
        return _Aff(-self.c, {p: -v for p, v in self.lin.items()}, self.err)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, a: float) -> "_Aff":
        return _Aff(a * self.c, {p: a * v for p, v in self.lin.items()},
                    abs(a) * self.err)

    def __mul__(self, other: "_Aff") -> "_Aff":
        # linear part kept exact; all deviation cross terms go to err
        lin = {p: self.c * v for p, v in other.lin.items()}
        for p, v in self.lin.items():
            lin[p] = lin.get(p, 0.0) + other.c * v
        err = (abs(self.c) * other.err + abs(other.c) * self.err
               + self.radius() * other.radius())
        return _Aff(self.c * other.c, lin, err)


def _rot_forms(zono: SliceableZonotope):
    """(cos, sin) affine forms encoded by a 2-D rotation zonotope."""
    forms = []
    for i in range(2):
        lin = {}
        for p, g in zono.sliceable:
            lin[p] = lin.get(p, 0.0) + g[i]
        err = float(np.sum(np.abs(zono.plain[i])))
        forms.append(_Aff(zono.center[i], lin, err))
    return forms[0], forms[1]


def _zono_from_forms(forms) -> SliceableZonotope:
    """Axis-box plain part; tagged parts stay exact per parameter."""
    center = np.array([f.c for f in forms])
    params = sorted({p for f in forms for p in f.lin})
    sliceable = [(p, np.array([f.lin.get(p, 0.0) for f in forms])) for p in params]
    n = len(forms)
    plain = []
    for i, f in enumerate(forms):
        if f.err > 0.0:
            e = np.zeros(n)
            e[i] = f.err
            plain.append(e)
    plain = np.array(plain).T if plain else np.zeros((n, 0))
    return SliceableZonotope(center, plain, sliceable)


# ---------------------------------------------------------------------------
# per-joint rotation sets


def rotation_set(entry, joint: int, kbar, q0_joint: float,
                 pos_budget: float = None) -> SliceableZonotope:
    """Enclosure of {(cos, sin) of q(1; k)} for k in the given subinterval.

    One sliceable generator carries the exact first-order dependence; two
    plain generators bound the arc curvature (radial sagitta) and the fit
    budget (tangential chord), so the circular arc plus fit uncertainty is
    contained for every k in the subinterval.
    """
    lo, hi = float(kbar[0]), float(kbar[1])
    if not (0.0 <= lo <= hi <= 1.0):
        raise ValueError("parameter subinterval must lie within [0, 1]")
    if pos_budget is None:
        pos_budget = POS_BUDGET_FRAC * entry.step_length
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    pt = eval_param_trajectory(entry, 0, joint, mid, q0_joint=q0_joint)
    off, slope = pt.end_pos_affine
    span = abs(slope) * (hi - lo)
    if span > np.pi / 2:
        raise ReachError(f"arc span {span:.3f} rad exceeds pi/2; subdivide the interval")

    c_ang = q0_joint + off + slope * mid
    gamma = slope * half
    e = np.array([np.cos(c_ang), np.sin(c_ang)])
    e_t = np.array([-np.sin(c_ang), np.cos(c_ang)])

    dmax = abs(gamma) + pos_budget
    radial = 0.5 * dmax**2             # |cos(d) - 1| <= d^2/2 toward -e
    tangential = pos_budget + dmax**3 / 6.0

    param = PARAM_KP if joint == PROSTHETIC_JOINT else PARAM_KH
    plain = np.stack([e * radial, e_t * tangential], axis=1)
    return SliceableZonotope(e, plain, [(param, e_t * gamma)])


def _velocity_forms(entry, kbar_h, kbar_p, vel_budget: float):
    """Per-joint tau=1 normalized-velocity affine forms."""
    forms = []
    for j in range(5):
        kbar = kbar_p if j == PROSTHETIC_JOINT else kbar_h
        param = PARAM_KP if j == PROSTHETIC_JOINT else PARAM_KH
        mid = 0.5 * (kbar[0] + kbar[1])
        half = 0.5 * (kbar[1] - kbar[0])
        pt = eval_param_trajectory(entry, 0, j, mid)
        off, slope = pt.end_vel_affine
        forms.append(_Aff(off + slope * mid, {param: slope * half}, vel_budget))
    return forms


# ---------------------------------------------------------------------------
# kinematic stacking


def _slot_rotations(pack, rot_forms):
    """Compose absolute link rotations down the chain (phi = R q)."""
    slots = []
    for j in range(5):
        cos_f, sin_f = _Aff(1.0), _Aff(0.0)
        for i in range(5):
            if pack.R[j, i] == 0.0:
                continue
            if pack.R[j, i] != 1.0:
                raise ReachError("chain composition expects unit angle sums")
            ci, si = rot_forms[i]
            cos_f, sin_f = cos_f * ci - sin_f * si, sin_f * ci + cos_f * si
        slots.append((cos_f, sin_f))
    return slots


def stack_sets(params: ModelParams, rot_sets, q0: Config, stance_foot=(0.0, 0.0)):
    """{X_sw, X_com}: chain positions from per-joint rotation enclosures.

    X_com is the mass-weighted Minkowski combination of per-link COM sets,
    matching forward kinematics exactly when every rotation set is a point.
    """
    pack = stance_pack(params, q0.stance)
    rot_forms = [_rot_forms(rot_sets[i]) for i in range(5)]
    slots = _slot_rotations(pack, rot_forms)

    def chain_point(coeffs):
        x = _Aff(stance_foot[0])
        y = _Aff(stance_foot[1])
        for j in range(5):
            if coeffs[j] == 0.0:
                continue
            cos_f, sin_f = slots[j]
            x = x + sin_f.scale(-coeffs[j])
            y = y + cos_f.scale(coeffs[j])
        return x, y

    sw_x, sw_y = chain_point(pack.pt_swing_foot)
    com_x, com_y = _Aff(0.0), _Aff(0.0)
    for k in range(5):
        w = pack.masses[k] / pack.total_mass
        cx, cy = chain_point(pack.acom[k])
        com_x = com_x + cx.scale(w)
        com_y = com_y + cy.scale(w)

    return {"X_sw": _zono_from_forms([sw_x, sw_y]),
            "X_com": _zono_from_forms([com_x, com_y]),
            "_slots": slots}


def velocity_set(params: ModelParams, entry, kbar_h, kbar_p, q0: Config,
                 vel_budget: float = VEL_BUDGET, pos_budget: float = None,
                 slots=None) -> SliceableZonotope:
    """Normalized horizontal COM velocity enclosure at tau=1.

    v_x = -sum_j w_j cos(phi_j) phidot_j: the Jacobian entries cos(phi_j)
    are enclosed over the configuration set, multiplied against the affine
    joint-velocity forms with cross terms absorbed conservatively.
    """
    pack = stance_pack(params, q0.stance)
    if slots is None:
        rot_sets = [rotation_set(entry, j, kbar_p if j == PROSTHETIC_JOINT else kbar_h,
                                 q0.q[j], pos_budget) for j in range(5)]
        slots = _slot_rotations(pack, [_rot_forms(z) for z in rot_sets])
    vel_forms = _velocity_forms(entry, kbar_h, kbar_p, vel_budget)

    vx = _Aff(0.0)
    for j in range(5):
        w = pack.com_w[j]
        if w == 0.0:
            continue
        cos_f, _ = slots[j]
        phidot = _Aff(0.0)
        for i in range(5):
            if pack.R[j, i] != 0.0:
                phidot = phidot + vel_forms[i]
        vx = vx + (cos_f * phidot).scale(-w)
    return _zono_from_forms([vx])


# ---------------------------------------------------------------------------
# artifact assembly


@dataclass
class FrsArtifact:
    step_index: int
    step_length: float
    kbar_h: tuple
    kbar_p: tuple
    q0: np.ndarray
    X_sw: SliceableZonotope
    X_com: SliceableZonotope
    X_comv: SliceableZonotope
    frs: SliceableZonotope          # 2-D (relative COM position, velocity)
    budgets: dict
    provenance: str = ""

    def to_dict(self) -> dict:
        return {
            "step_index": int(self.step_index),
            "step_length": float(self.step_length),
            "kbar_h": [float(v) for v in self.kbar_h],
            "kbar_p": [float(v) for v in self.kbar_p],
            "q0": np.asarray(self.q0, dtype=float).tolist(),
            "X_sw": self.X_sw.to_dict(),
            "X_com": self.X_com.to_dict(),
            "X_comv": self.X_comv.to_dict(),
            "frs": self.frs.to_dict(),
            "budgets": self.budgets,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_dict(doc: dict) -> "FrsArtifact":
        return FrsArtifact(
            step_index=doc["step_index"], step_length=doc["step_length"],
            kbar_h=tuple(doc["kbar_h"]), kbar_p=tuple(doc["kbar_p"]),
            q0=np.array(doc["q0"]),
            X_sw=SliceableZonotope.from_dict(doc["X_sw"]),
            X_com=SliceableZonotope.from_dict(doc["X_com"]),
            X_comv=SliceableZonotope.from_dict(doc["X_comv"]),
            frs=SliceableZonotope.from_dict(doc["frs"]),
            budgets=doc.get("budgets", {}), provenance=doc.get("provenance", ""))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path) -> "FrsArtifact":
        with open(path) as fh:
            return FrsArtifact.from_dict(json.load(fh))


def assemble_frs(X_sw: SliceableZonotope, X_com: SliceableZonotope,
                 X_comv: SliceableZonotope, *, step_index: int, step_length: float,
                 kbar_h, kbar_p, q0, budgets=None, provenance: str = "") -> FrsArtifact:
    """FRS = (X_sw minus X_com in the horizontal coordinate) x X_comv."""

    def hor(z: SliceableZonotope, row: int, sign: float):
        center = sign * z.center[row]
        slc = [(p, sign * g[row]) for p, g in z.sliceable]
        plain = sign * z.plain[row]
        return center, slc, plain

    c_sw, s_sw, p_sw = hor(X_sw, 0, 1.0)
    c_cm, s_cm, p_cm = hor(X_com, 0, -1.0)
    c_v, s_v, p_v = hor(X_comv, 0, 1.0)

    center = np.array([c_sw + c_cm, c_v])
    sliceable = ([(p, np.array([g, 0.0])) for p, g in s_sw + s_cm]
                 + [(p, np.array([0.0, g])) for p, g in s_v])
    cols = ([np.array([g, 0.0]) for g in np.concatenate([p_sw, p_cm]) if g != 0.0]
            + [np.array([0.0, g]) for g in p_v if g != 0.0])
    plain = np.array(cols).T if cols else np.zeros((2, 0))
    frs = SliceableZonotope(center, plain, sliceable)
    return FrsArtifact(step_index=step_index, step_length=step_length,
                       kbar_h=tuple(kbar_h), kbar_p=tuple(kbar_p),
                       q0=np.asarray(q0, dtype=float).copy(),
                       X_sw=X_sw, X_com=X_com, X_comv=X_comv, frs=frs,
                       budgets=budgets or {}, provenance=provenance)


def build_frs(params: ModelParams, entry, step_index: int, kbar_h, kbar_p,
              q0: Config = None, pos_budget: float = None,
              vel_budget: float = VEL_BUDGET, provenance: str = "") -> FrsArtifact:
    """One cell of the cache: rotation sets -> stacking -> velocity -> FRS."""
    if q0 is None:
        q0 = Config(entry.q0.copy(), Stance.PROSTHETIC)
    if pos_budget is None:
        pos_budget = POS_BUDGET_FRAC * entry.step_length
    rot_sets = [rotation_set(entry, j, kbar_p if j == PROSTHETIC_JOINT else kbar_h,
                             q0.q[j], pos_budget) for j in range(5)]
    stacked = stack_sets(params, rot_sets, q0)
    X_comv = velocity_set(params, entry, kbar_h, kbar_p, q0,
                          vel_budget, pos_budget, slots=stacked["_slots"])
    return assemble_frs(stacked["X_sw"], stacked["X_com"], X_comv,
                        step_index=step_index, step_length=entry.step_length,
                        kbar_h=kbar_h, kbar_p=kbar_p, q0=q0.q,
                        budgets={"pos": pos_budget, "vel": vel_budget},
                        provenance=provenance)


# ---------------------------------------------------------------------------
# buffer / polynomial-center split


@dataclass
class BufferSplit:
    """FRS(k_p) = {x_poly(k_p)} + X_buf with X_buf independent of k_p."""

    center: np.ndarray          # (2,)
    gen_p: np.ndarray           # (2,) summed k_p-tagged generator
    kbar_p: tuple
    X_buf: Zonotope2

    def xi(self, k_p: float) -> float:
        lo, hi = self.kbar_p
        return (2.0 * k_p - (lo + hi)) / (hi - lo)

    def x_poly(self, k_p: float) -> np.ndarray:
        return self.center + self.gen_p * self.xi(k_p)

    def grad(self) -> np.ndarray:
        lo, hi = self.kbar_p
        return self.gen_p * (2.0 / (hi - lo))


def buffer_split(frs: FrsArtifact) -> BufferSplit:
    """Exact affine k_p center map plus a parameter-free buffer zonotope."""
    z = frs.frs
    gen_p = z.tagged(PARAM_KP)
    rest = z.drop_to_plain(PARAM_KH)
    plain = [g for p, g in rest.sliceable if p != PARAM_KP]
    buf_gens = np.hstack([rest.plain] + [g[:, None] for g in plain]) \
        if plain else rest.plain
    return BufferSplit(center=z.center.copy(), gen_p=gen_p,
                       kbar_p=tuple(frs.kbar_p),
                       X_buf=Zonotope2(np.zeros(2), buf_gens))


# ---------------------------------------------------------------------------
# cache layout


def frs_cache_path(root, step_index: int, ih: int, ip: int) -> str:
    return os.path.join(root, f"frs_s{step_index:02d}_h{ih:02d}_p{ip:02d}.json")


def build_frs_cache(params: ModelParams, recovery_lib, root,
                    n_sub: int = N_SUBINTERVALS, provenance: str = "",
                    verbose: bool = False) -> int:
    """Precompute all (step, K_h, K_p) artifacts; returns the cell count."""
    os.makedirs(root, exist_ok=True)
    count = 0
    for si, entry in enumerate(recovery_lib.entries):
        for ih in range(n_sub):
            for ip in range(n_sub):
                art = build_frs(params, entry, si, subinterval(ih, n_sub),
                                subinterval(ip, n_sub), provenance=provenance)
                art.save(frs_cache_path(root, si, ih, ip))
                count += 1
        if verbose:
            print(f"FRS cache: step {si + 1}/{len(recovery_lib.entries)} done",
                  flush=True)
    return count
