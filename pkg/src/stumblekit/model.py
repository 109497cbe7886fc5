"""Planar five-link human-prosthesis biped.

Rigid-body dynamics in pinned (single-support) coordinates, forward
kinematics, the phase variable, the heel-strike guard readout, and the
plastic impact map with stance/swing relabeling.

Coordinate layout (stance-indexed, so the same formulas serve both support
modes):

    q = [q_h1, q_h2, q_h3, q_h4, q_p1]

q_h1 is the torso absolute angle, q_h2 the stance-hip relative angle,
q_h3 the swing-hip relative angle, q_h4 the swing-knee relative angle and
q_p1 the stance-knee relative angle. A stance flag records which physical
leg (prosthetic or contralateral) currently occupies the stance slots.

All absolute link angles are measured counterclockwise from vertical; each
segment's axis unit vector e(phi) = (-sin phi, cos phi) points up the chain
(foot to knee to hip, hip to head). Walking direction is +x. Knee flexion
is negative (zero = straight leg).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from importlib import resources

import numpy as np

NQ = 5
NU = 4

# q-vector slots
IQ_H1, IQ_H2, IQ_H3, IQ_H4, IQ_P1 = 0, 1, 2, 3, 4

# absolute-angle (link) slots: torso, stance thigh, stance shank,
# swing thigh, swing shank
L_TOR, L_STH, L_SSH, L_WTH, L_WSH = 0, 1, 2, 3, 4

# phi = R_PHI @ q
R_PHI = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 1.0],
        [1.0, 0.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 1.0, 0.0],
    ]
)

# torque slots act on [q_h2, q_h3, q_h4, q_p1]; torso is unactuated
B_INPUT = np.zeros((NQ, NU))
B_INPUT[1:, :] = np.eye(NU)

# stance/swing relabeling at impact: new[i] = old[STRIDE_PERM[i]]
STRIDE_PERM = np.array([0, 2, 1, 4, 3])

# phase variable theta = THETA_COEFF @ q
THETA_COEFF = np.array([-1.0, -1.0, 0.0, 0.0, -0.5])


class Stance(IntEnum):
    PROSTHETIC = 0
    CONTRALATERAL = 1

    @property
    def label(self) -> str:
        return "prosthetic-stance" if self == Stance.PROSTHETIC else "contralateral-stance"

    @staticmethod
    def from_label(label: str) -> "Stance":
        table = {"prosthetic-stance": Stance.PROSTHETIC, "contralateral-stance": Stance.CONTRALATERAL}
        if label not in table:
            raise ValueError(f"unknown stance label {label!r}")
        return table[label]

    def flipped(self) -> "Stance":
        return Stance.CONTRALATERAL if self == Stance.PROSTHETIC else Stance.PROSTHETIC


@dataclass(frozen=True)
class LinkParams:
    mass_kg: float
    length_m: float
    com_offset_m: float  # from the anatomically proximal joint
    inertia_kgm2: float  # about the COM

    def validate(self, name: str) -> None:
        if not (self.mass_kg > 0 and self.length_m > 0 and self.inertia_kgm2 > 0):
            raise ValueError(f"{name}: mass, length, inertia must be strictly positive")
        if not (0.0 <= self.com_offset_m <= self.length_m):
            raise ValueError(f"{name}: COM offset must lie within [0, length]")


@dataclass(frozen=True)
class ModelParams:
    torso: LinkParams
    contralateral_thigh: LinkParams
    contralateral_shank: LinkParams
    prosthetic_thigh: LinkParams
    prosthetic_shank: LinkParams
    gravity_mps2: float = 9.81
    knee_flexion_limit_rad: float = -2.4
    knee_extension_limit_rad: float = 0.05

    def __post_init__(self):
        for name in ("torso", "contralateral_thigh", "contralateral_shank", "prosthetic_thigh", "prosthetic_shank"):
            getattr(self, name).validate(name)
        if self.gravity_mps2 <= 0:
            raise ValueError("gravity must be positive")

    def thigh(self, side_is_prosthetic: bool) -> LinkParams:
        return self.prosthetic_thigh if side_is_prosthetic else self.contralateral_thigh

    def shank(self, side_is_prosthetic: bool) -> LinkParams:
        return self.prosthetic_shank if side_is_prosthetic else self.contralateral_shank

    def to_dict(self) -> dict:
        links = {}
        for name in ("torso", "contralateral_thigh", "contralateral_shank", "prosthetic_thigh", "prosthetic_shank"):
            lp = getattr(self, name)
            links[name] = {
                "mass_kg": lp.mass_kg,
                "length_m": lp.length_m,
                "com_offset_m": lp.com_offset_m,
                "inertia_kgm2": lp.inertia_kgm2,
            }
        return {
            "links": links,
            "gravity_mps2": self.gravity_mps2,
            "knee_flexion_limit_rad": self.knee_flexion_limit_rad,
            "knee_extension_limit_rad": self.knee_extension_limit_rad,
            "n_actuators": NU,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelParams":
        links = {name: LinkParams(**fields) for name, fields in doc["links"].items()}
        return ModelParams(
            torso=links["torso"],
            contralateral_thigh=links["contralateral_thigh"],
            contralateral_shank=links["contralateral_shank"],
            prosthetic_thigh=links["prosthetic_thigh"],
            prosthetic_shank=links["prosthetic_shank"],
            gravity_mps2=doc["gravity_mps2"],
            knee_flexion_limit_rad=doc.get("knee_flexion_limit_rad", -2.4),
            knee_extension_limit_rad=doc.get("knee_extension_limit_rad", 0.05),
        )

    @staticmethod
    def from_json(path) -> "ModelParams":
        with open(path) as f:
            return ModelParams.from_dict(json.load(f))

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def default_params() -> ModelParams:
    """Packaged human-scale asymmetric defaults (prosthetic side lighter)."""
    with resources.files("stumblekit.data").joinpath("model_default.json").open() as f:
        return ModelParams.from_dict(json.load(f))


@dataclass
class Config:
    q: np.ndarray  # (5,)
    stance: Stance

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.q.shape != (NQ,) or not np.all(np.isfinite(self.q)):
            raise ValueError("config must be a finite 5-vector")


@dataclass
class State:
    config: Config
    qdot: np.ndarray  # (5,)

    def __post_init__(self):
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.qdot.shape != (NQ,) or not np.all(np.isfinite(self.qdot)):
            raise ValueError("velocity must be a finite 5-vector")

    @property
    def q(self) -> np.ndarray:
        return self.config.q

    @property
    def stance(self) -> Stance:
        return self.config.stance

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.config.q, self.qdot])

    @staticmethod
    def from_vector(x: np.ndarray, stance: Stance) -> "State":
        x = np.asarray(x, dtype=float)
        return State(Config(x[:NQ].copy(), stance), x[NQ:].copy())


@dataclass
class DynamicsTerms:
    M: np.ndarray      # (5,5) mass matrix
    bias: np.ndarray   # (5,) Coriolis/centrifugal plus gravity
    B: np.ndarray      # (5,4) input map


class StancePack:
    """Constant arrays of the pinned chain for one stance assignment.

    acom[k, j] is the coefficient of e(phi_j) in link k's COM position
    relative to the stance foot; P, gw, com_w are the derived mass, gravity
    and COM weights that make the dynamics closed-form in phi = R_PHI q.
    """

    def __init__(self, params: ModelParams, stance: Stance):
        self.params = params
        self.stance = stance
        st_pros = stance == Stance.PROSTHETIC
        sth = params.thigh(st_pros)
        ssh = params.shank(st_pros)
        wth = params.thigh(not st_pros)
        wsh = params.shank(not st_pros)
        tor = params.torso

        self.masses = np.array([tor.mass_kg, sth.mass_kg, ssh.mass_kg, wth.mass_kg, wsh.mass_kg])
        self.inertias = np.array([tor.inertia_kgm2, sth.inertia_kgm2, ssh.inertia_kgm2, wth.inertia_kgm2, wsh.inertia_kgm2])
        self.total_mass = float(self.masses.sum())
        self.lengths = np.array([tor.length_m, sth.length_m, ssh.length_m, wth.length_m, wsh.length_m])

        # COM coefficients per link over phi slots [tor, sth, ssh, wth, wsh]
        acom = np.zeros((NQ, NQ))
        acom[L_TOR] = [tor.com_offset_m, sth.length_m, ssh.length_m, 0.0, 0.0]
        acom[L_STH] = [0.0, sth.length_m - sth.com_offset_m, ssh.length_m, 0.0, 0.0]
        acom[L_SSH] = [0.0, 0.0, ssh.length_m - ssh.com_offset_m, 0.0, 0.0]
        acom[L_WTH] = [0.0, sth.length_m, ssh.length_m, -wth.com_offset_m, 0.0]
        acom[L_WSH] = [0.0, sth.length_m, ssh.length_m, -wth.length_m, -wsh.com_offset_m]
        self.acom = acom

        # named points, same coefficient form
        self.pt_stance_knee = np.array([0.0, 0.0, ssh.length_m, 0.0, 0.0])
        self.pt_hip = np.array([0.0, sth.length_m, ssh.length_m, 0.0, 0.0])
        self.pt_torso_top = np.array([tor.length_m, sth.length_m, ssh.length_m, 0.0, 0.0])
        self.pt_swing_knee = np.array([0.0, sth.length_m, ssh.length_m, -wth.length_m, 0.0])
        self.pt_swing_foot = np.array([0.0, sth.length_m, ssh.length_m, -wth.length_m, -wsh.length_m])

        g = params.gravity_mps2
        self.P = np.einsum("k,kj,kl->jl", self.masses, acom, acom)
        self.mw = self.masses @ acom            # per-slot mass moment
        self.gw = g * self.mw                   # gravity weights
        self.com_w = self.mw / self.total_mass  # COM position coefficients
        self.R = R_PHI
        self.B = B_INPUT


@lru_cache(maxsize=8)
def _pack_cached(params: ModelParams, stance: Stance) -> StancePack:
    return StancePack(params, stance)


def stance_pack(params: ModelParams, stance: Stance) -> StancePack:
    return _pack_cached(params, stance)


def _check_finite_state(state: State) -> None:
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot))):
        raise ValueError("state contains non-finite entries")


def mass_matrix_and_bias(pack: StancePack, q, qd):
    """Closed-form M(q) and bias(q, qd) = C qd + G, batched over leading axes.

    Works on float or complex arrays (complex-step differentiation safe).
    """
    q = np.asarray(q)
    qd = np.asarray(qd)
    phi = q @ pack.R.T
    phid = qd @ pack.R.T
    dphi = phi[..., :, None] - phi[..., None, :]
    Mphi = pack.P * np.cos(dphi)
    idx = np.arange(NQ)
    Mphi = Mphi.copy()
    Mphi[..., idx, idx] += pack.inertias
    M = pack.R.T @ Mphi @ pack.R
    cor = np.einsum("jl,...jl,...l->...j", pack.P, np.sin(dphi), phid**2)
    grav = -pack.gw * np.sin(phi)
    bias = (cor + grav) @ pack.R
    return M, bias


def dynamics_terms(params: ModelParams, state: State) -> DynamicsTerms:
    """M, bias, B with M qdd + bias = B u for the pinned chain."""
    _check_finite_state(state)
    pack = stance_pack(params, state.stance)
    M, bias = mass_matrix_and_bias(pack, state.q, state.qdot)
    return DynamicsTerms(M=M, bias=bias, B=pack.B.copy())


def forward_dynamics(pack: StancePack, q, qd, u):
    """qdd = M^{-1} (B u - bias), batched over leading axes."""
    M, bias = mass_matrix_and_bias(pack, q, qd)
    rhs = u @ pack.B.T - bias
    return np.linalg.solve(M, rhs[..., None])[..., 0]


def kinetic_energy(pack: StancePack, q, qd):
    M, _ = mass_matrix_and_bias(pack, q, qd)
    return 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)


def potential_energy(pack: StancePack, q):
    phi = np.asarray(q) @ pack.R.T
    return np.sum(pack.gw * np.cos(phi), axis=-1)


def phase_variable(config: Config) -> float:
    """Stance leg angle theta; increases monotonically during forward walking."""
    return float(THETA_COEFF @ config.q)


def theta_of(q) -> np.ndarray:
    """Vectorized phase variable on raw q arrays (shape (..., 5))."""
    return np.asarray(q) @ THETA_COEFF


def point_position(pack: StancePack, coeffs: np.ndarray, q, stance_foot=(0.0, 0.0)):
    """Position of a chain point given its phi-slot coefficients."""
    phi = np.asarray(q) @ pack.R.T
    x = stance_foot[0] - np.sum(coeffs * np.sin(phi), axis=-1)
    y = stance_foot[1] + np.sum(coeffs * np.cos(phi), axis=-1)
    return np.stack([x, y], axis=-1)


def point_velocity(pack: StancePack, coeffs: np.ndarray, q, qd):
    """Velocity of a chain point (stance foot pinned)."""
    q = np.asarray(q)
    phi = q @ pack.R.T
    phid = np.asarray(qd) @ pack.R.T
    vx = -np.sum(coeffs * np.cos(phi) * phid, axis=-1)
    vy = -np.sum(coeffs * np.sin(phi) * phid, axis=-1)
    return np.stack([vx, vy], axis=-1)


@dataclass
class FKResult:
    joints: dict          # name -> (2,) point
    link_coms: np.ndarray  # (5,2)
    com: np.ndarray        # (2,)
    swing_foot: np.ndarray  # (2,)


def forward_kinematics(params: ModelParams, config: Config, stance_foot=(0.0, 0.0)) -> FKResult:
    pack = stance_pack(params, config.stance)
    q = config.q
    joints = {
        "stance_foot": np.asarray(stance_foot, dtype=float),
        "stance_knee": point_position(pack, pack.pt_stance_knee, q, stance_foot),
        "hip": point_position(pack, pack.pt_hip, q, stance_foot),
        "torso_top": point_position(pack, pack.pt_torso_top, q, stance_foot),
        "swing_knee": point_position(pack, pack.pt_swing_knee, q, stance_foot),
        "swing_foot": point_position(pack, pack.pt_swing_foot, q, stance_foot),
    }
    link_coms = np.stack([point_position(pack, pack.acom[k], q, stance_foot) for k in range(NQ)])
    com = (pack.masses[:, None] * link_coms).sum(axis=0) / pack.total_mass
    return FKResult(joints=joints, link_coms=link_coms, com=com, swing_foot=joints["swing_foot"])


def heel_strike_guard(params: ModelParams, state: State) -> float:
    """Signed swing-foot height; the integrator applies the firing conditions."""
    _check_finite_state(state)
    pack = stance_pack(params, state.stance)
    return float(point_position(pack, pack.pt_swing_foot, state.q)[1])


def swing_foot_height_and_rate(pack: StancePack, q, qd):
    p = point_position(pack, pack.pt_swing_foot, q)
    v = point_velocity(pack, pack.pt_swing_foot, q, qd)
    return p[..., 1], v[..., 1]


def _extended_inertia(pack: StancePack, q):
    """7x7 inertia of the free chain in (q, base) coordinates, dtype-generic."""
    q = np.asarray(q)
    phi = q @ pack.R.T
    dphi = phi[..., :, None] - phi[..., None, :]
    Mphi = pack.P * np.cos(dphi)
    idx = np.arange(NQ)
    Mphi = Mphi.copy()
    Mphi[..., idx, idx] += pack.inertias
    Mqq = pack.R.T @ Mphi @ pack.R
    # e'(phi) = (-cos phi, -sin phi)
    eprime = np.stack([-np.cos(phi), -np.sin(phi)], axis=-1)  # (...,5,2)
    Mphib = pack.mw[:, None] * eprime
    Mqb = np.swapaxes(pack.R.T @ Mphib, -1, -2)  # (...,2,5) -> rows are base coords
    Me = np.zeros(q.shape[:-1] + (7, 7), dtype=q.dtype)
    Me[..., :5, :5] = Mqq
    Me[..., :5, 5:] = np.swapaxes(Mqb, -1, -2)
    Me[..., 5:, :5] = Mqb
    Me[..., 5, 5] = pack.total_mass
    Me[..., 6, 6] = pack.total_mass
    return Me


def swing_foot_jacobian_ext(pack: StancePack, q):
    """2x7 Jacobian of the swing-foot point w.r.t. (q, base), dtype-generic."""
    q = np.asarray(q)
    phi = q @ pack.R.T
    eprime = np.stack([-np.cos(phi), -np.sin(phi)], axis=-1)  # (...,5,2)
    E = np.swapaxes(pack.pt_swing_foot[:, None] * eprime, -1, -2)  # (...,2,5)
    Jq = E @ pack.R
    J = np.zeros(q.shape[:-1] + (2, 7), dtype=q.dtype)
    J[..., :2, :5] = Jq
    J[..., 0, 5] = 1.0
    J[..., 1, 6] = 1.0
    return J


def impact_velocity_map(pack: StancePack, q, qd):
    """Plastic impact at the swing foot: pre-relabel post-impact velocities.

    The chain is momentarily free (old stance pin released); an impulse at
    the swing-foot contact brings that point to rest. Returns (qd_plus,
    base_velocity_plus, impulse). dtype-generic for complex-step use.
    """
    q = np.asarray(q)
    qd = np.asarray(qd)
    Me = _extended_inertia(pack, q)
    J = swing_foot_jacobian_ext(pack, q)
    n = q.shape[:-1]
    A = np.zeros(n + (9, 9), dtype=Me.dtype)
    A[..., :7, :7] = Me
    A[..., :7, 7:] = -np.swapaxes(J, -1, -2)
    A[..., 7:, :7] = J
    qd_ext = np.zeros(n + (7,), dtype=qd.dtype)
    qd_ext[..., :5] = qd
    rhs = np.zeros(n + (9,), dtype=Me.dtype)
    rhs[..., :7] = (Me @ qd_ext[..., None])[..., 0]
    sol = np.linalg.solve(A, rhs[..., None])[..., 0]
    return sol[..., :5], sol[..., 5:7], sol[..., 7:9]


def impact_map(params: ModelParams, pre_state: State) -> State:
    """Heel-strike reset: plastic impact, then stance/swing relabeling."""
    _check_finite_state(pre_state)
    pack = stance_pack(params, pre_state.stance)
    try:
        qd_plus, _, _ = impact_velocity_map(pack, pre_state.q, pre_state.qdot)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"singular impact matrix at q={pre_state.q}") from e
    q_new = pre_state.q[STRIDE_PERM]
    qd_new = qd_plus[STRIDE_PERM]
    return State(Config(q_new, pre_state.stance.flipped()), qd_new)


def angular_momentum_about(pack: StancePack, q, qd, base_vel, point):
    """Angular momentum of the whole chain about a fixed point.

    base_vel is the stance-foot translational velocity (zero while pinned).
    """
    q = np.asarray(q)
    phi = q @ pack.R.T
    phid = np.asarray(qd) @ pack.R.T
    eprime = np.stack([-np.cos(phi), -np.sin(phi)], axis=-1)  # (5,2)
    coms = np.stack([point_position(pack, pack.acom[k], q) for k in range(NQ)])
    vels = np.asarray(base_vel)[None, :] + np.einsum("kj,jc,j->kc", pack.acom, eprime, phid)
    r = coms - np.asarray(point)[None, :]
    cross = r[:, 0] * vels[:, 1] - r[:, 1] * vels[:, 0]
    return float(np.sum(pack.masses * cross) + np.sum(pack.inertias * phid))
