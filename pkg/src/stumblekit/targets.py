"""Per-step-length target polytopes in the heel-strike outcome plane.

Coordinates: (relative COM position = horizontal swing-foot minus COM at
heel strike, in m; normalized horizontal COM velocity, in m since the
stumble clock is dimensionless). Success labels come from simulating
nominal walking from the composed tau=1 state; the target set is the
convex hull of the successes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import simulate
from .geometry import PolytopeH, convex_hull, polytope_from_vertices
from .model import (
    Config,
    ModelParams,
    Stance,
    State,
    impact_map,
    point_position,
    point_velocity,
    stance_pack,
)
from .recovery import RecoveryEntry, eval_param_trajectory

DEFAULT_GRID = (21, 21)
INTERIOR_FAILURE_TOL = 0.02    # fraction of hull-interior points allowed to fail
WALK_CHECK_STEPS = 10

HUMAN_JOINTS = (0, 1, 2, 3)
PROSTHETIC_JOINT = 4


class TargetBuildError(RuntimeError):
    pass


@dataclass
class TargetSet:
    step_index: int
    step_length: float
    polytope: PolytopeH
    points: np.ndarray         # (n, 2) outcome-plane samples
    labels: np.ndarray         # (n,) success flags
    ks: np.ndarray             # (n, 2) generating (k_h, k_p)
    interior_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "step_index": int(self.step_index),
            "step_length": float(self.step_length),
            "A": self.polytope.A.tolist(),
            "b": self.polytope.b.tolist(),
            "points": self.points.tolist(),
            "labels": self.labels.astype(int).tolist(),
            "ks": self.ks.tolist(),
            "interior_failures": int(self.interior_failures),
        }

    @staticmethod
    def from_dict(doc: dict) -> "TargetSet":
        return TargetSet(
            step_index=doc["step_index"], step_length=doc["step_length"],
            polytope=PolytopeH(np.array(doc["A"]), np.array(doc["b"])),
            points=np.array(doc["points"]), labels=np.array(doc["labels"], dtype=bool),
            ks=np.array(doc["ks"]), interior_failures=doc.get("interior_failures", 0))


@dataclass
class TargetLibrary:
    sets: list

    def __len__(self):
        return len(self.sets)

    def __getitem__(self, i) -> TargetSet:
        return self.sets[i]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"sets": [s.to_dict() for s in self.sets]}, fh)

    @staticmethod
    def load(path) -> "TargetLibrary":
        with open(path) as fh:
            doc = json.load(fh)
        return TargetLibrary([TargetSet.from_dict(d) for d in doc["sets"]])


def joint_parameter(joint: int, k_h: float, k_p: float) -> float:
    """Human joints share k_h; the prosthetic stance knee takes k_p."""
    return k_p if joint == PROSTHETIC_JOINT else k_h


def heel_strike_state(entry: RecoveryEntry, k_h: float, k_p: float):
    """Compose the tau=1 configuration and velocities from the fitted family.

    Returns (q1, qdn1, qd1): configuration, normalized velocities (rad per
    unit tau), and real-time velocities under the reference completion
    duration T2_ref.
    """
    q1 = np.empty(5)
    qdn1 = np.empty(5)
    for j in range(5):
        k = joint_parameter(j, k_h, k_p)
        pt = eval_param_trajectory(entry, 0, j, k)
        q_end, qdn_end = pt.end_state
        q1[j] = q_end
        qdn1[j] = qdn_end
    qd1 = qdn1 * (0.5 / entry.T2_ref)
    return q1, qdn1, qd1


def outcome_coordinates(params: ModelParams, q1, qdn1):
    """(relative COM position, normalized horizontal COM velocity) at tau=1."""
    pack = stance_pack(params, Stance.PROSTHETIC)
    sw = point_position(pack, pack.pt_swing_foot, q1)
    com = point_position(pack, pack.com_w, q1)
    vcom = point_velocity(pack, pack.com_w, q1, qdn1)
    return float(sw[0] - com[0]), float(vcom[0])


def simulate_outcome(params: ModelParams, gait, entry: RecoveryEntry,
                     k_h: float, k_p: float, walk_steps: int = WALK_CHECK_STEPS) -> dict:
    """Outcome-plane point plus the nominal-walking success label."""
    q1, qdn1, qd1 = heel_strike_state(entry, k_h, k_p)
    x, v = outcome_coordinates(params, q1, qdn1)
    try:
        post = impact_map(params, State(Config(q1, Stance.PROSTHETIC), qd1))
        walk = simulate.simulate_walk(params, gait, post, walk_steps)
        success = bool(walk["converged"])
        reason = walk["reason"]
    except (ValueError, FloatingPointError) as exc:
        success = False
        reason = f"state-composition: {exc}"
    return {"point": (x, v), "success": success, "reason": reason,
            "k_h": float(k_h), "k_p": float(k_p)}


def sample_outcomes(params: ModelParams, gait, entry: RecoveryEntry,
                    grid=DEFAULT_GRID, verbose: bool = False):
    """Labelled outcome points over a k_h x k_p grid (or explicit pairs)."""
    if isinstance(grid, tuple):
        kh_vals = np.linspace(0.0, 1.0, grid[0])
        kp_vals = np.linspace(0.0, 1.0, grid[1])
        pairs = [(kh, kp) for kh in kh_vals for kp in kp_vals]
    else:
        pairs = [(float(kh), float(kp)) for kh, kp in np.asarray(grid)]
    if any(not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0) for a, b in pairs):
        raise ValueError("grid must lie within the unit square")
    points = np.empty((len(pairs), 2))
    labels = np.empty(len(pairs), dtype=bool)
    ks = np.array(pairs)
    for i, (kh, kp) in enumerate(pairs):
        out = simulate_outcome(params, gait, entry, kh, kp)
        points[i] = out["point"]
        labels[i] = out["success"]
        if verbose and (i + 1) % 50 == 0:
            print(f"  sampled {i + 1}/{len(pairs)} "
                  f"({int(labels[:i + 1].sum())} successes)", flush=True)
    return points, labels, ks


def build_target_set(points, labels, ks=None, step_index: int = -1,
                     step_length: float = 0.0) -> TargetSet:
    """Convex hull of success points, H-rep with unit outward normals.

    Interior failure points (label noise from the sampled basin boundary)
    are tolerated up to INTERIOR_FAILURE_TOL of all hull-interior samples.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    ks = np.zeros((len(points), 2)) if ks is None else np.asarray(ks, dtype=float)
    succ = points[labels]
    if len(succ) < 3:
        raise TargetBuildError("target-degenerate: fewer than 3 success points")
    try:
        hull = convex_hull(succ)
    except ValueError as exc:
        raise TargetBuildError(f"target-degenerate: {exc}") from exc
    poly = polytope_from_vertices(hull)

    margins = poly.margin_many(points)
    interior = margins < -1e-9
    bad = interior & ~labels
    n_bad = int(bad.sum())
    n_int = int(interior.sum())
    if n_int and n_bad / n_int > INTERIOR_FAILURE_TOL:
        raise TargetBuildError(
            f"{n_bad}/{n_int} hull-interior samples are failures; "
            "success region is not convex at this sampling density")
    return TargetSet(step_index=step_index, step_length=step_length,
                     polytope=poly, points=points, labels=labels, ks=ks,
                     interior_failures=n_bad)


def build_target_library(params: ModelParams, gait_library, recovery_lib,
                         grid=DEFAULT_GRID, verbose: bool = False) -> TargetLibrary:
    sets = []
    for i, gait in enumerate(gait_library):
        if verbose:
            print(f"target set for L={gait.step_length:.2f} "
                  f"({i + 1}/{len(gait_library)})", flush=True)
        entry = recovery_lib[i]
        points, labels, ks = sample_outcomes(params, gait, entry, grid, verbose)
        sets.append(build_target_set(points, labels, ks, i, gait.step_length))
        if verbose:
            ts = sets[-1]
            print(f"  hull rows={len(ts.polytope.b)} successes={int(labels.sum())}"
                  f"/{len(labels)} interior failures={ts.interior_failures}",
                  flush=True)
    return TargetLibrary(sets)
