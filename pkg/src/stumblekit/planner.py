"""Online selection of the prosthetic trajectory parameter.

Feasibility is certified set-wise: the target polytope shrinks by the
reach-set buffer, so any parameter whose polynomial center lands strictly
inside the shrunk polytope steers every compatible human outcome into the
target. The constraint rows are affine in the scalar parameter, so the SQP
step from any start point is exact after one linearization; the endpoint
and midpoint starts double as feasibility probes and timeout checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .geometry import minkowski_diff
from .model import Config, ModelParams
from .reach import (
    N_SUBINTERVALS,
    FrsArtifact,
    buffer_split,
    build_frs,
    frs_cache_path,
    subinterval,
)
from .recovery import RecoveryEntry, eval_param_trajectory
from .simulate import TrajectoryRef
from .targets import PROSTHETIC_JOINT, TargetSet

EPS_MARGIN = 1e-6
TIMEOUT_MS_DEFAULT = 75.0

PHI_CHOICES = ("zero", "quadratic")


def phi_value(phi: str, k_p: float, k_ref: float) -> float:
    if phi == "zero":
        return 0.0
    return (k_p - k_ref) ** 2


@dataclass
class PlanRequest:
    """One online query: a stumble onset with a known human subinterval."""

    step_index: int
    ih: int                          # index of the human subinterval
    q0: Config | None = None         # onset configuration; None = library nominal
    phi: str = "zero"
    phi_ref: float = 0.5             # quadratic cost center in parameter space
    timeout_ms: float = TIMEOUT_MS_DEFAULT
    n_sub: int = N_SUBINTERVALS

    def __post_init__(self):
        if self.phi not in PHI_CHOICES:
            raise ValueError(f"phi must be one of {PHI_CHOICES}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if not 0 <= self.ih < self.n_sub:
            raise ValueError("human subinterval index out of range")

    @property
    def kbar_h(self):
        return subinterval(self.ih, self.n_sub)


@dataclass
class ConstraintSet:
    """c(k_p) = max(A x_poly(k_p) - b) over the buffer-shrunk target."""

    step_index: int
    kbar_p: tuple
    feasible: bool                  # False: buffer swallowed the target
    A: np.ndarray = None
    b: np.ndarray = None
    split: object = None            # BufferSplit with x_poly / grad

    def c(self, k_p: float) -> float:
        if not self.feasible:
            return np.inf
        return float(np.max(self.A @ self.split.x_poly(k_p) - self.b))

    def c_grad(self, k_p: float) -> float:
        """Derivative of the active row (constant: rows are affine)."""
        if not self.feasible:
            return 0.0
        vals = self.A @ self.split.x_poly(k_p) - self.b
        return float(self.A[int(np.argmax(vals))] @ self.split.grad())

    def feasible_interval(self, eps: float = EPS_MARGIN):
        """Exact {k_p in kbar_p : c(k_p) <= -eps} or None.

        Each row is affine in k_p, so the feasible set is an interval
        obtained by intersecting half-lines.
        """
        if not self.feasible:
            return None
        lo, hi = self.kbar_p
        g = self.A @ self.split.grad()               # slope of each row
        v0 = self.A @ self.split.x_poly(lo) - self.b  # value at lo
        for gi, vi in zip(g, v0):
            if abs(gi) < 1e-15:
                if vi > -eps:
                    return None
                continue
            bound = lo + (-eps - vi) / gi
            if gi > 0:
                hi = min(hi, bound)
            else:
                lo = max(lo, bound)
            if lo > hi:
                return None
        return (lo, hi)


def build_constraint(frs: FrsArtifact, target: TargetSet) -> ConstraintSet:
    """Shrink the target by the parameter-free buffer; adopt its rows."""
    if frs.step_index != target.step_index:
        raise ValueError(
            f"step mismatch: reach artifact {frs.step_index}, "
            f"target {target.step_index}")
    split = buffer_split(frs)
    xc = minkowski_diff(target.polytope, split.X_buf)
    if xc.is_empty():
        return ConstraintSet(step_index=frs.step_index, kbar_p=split.kbar_p,
                             feasible=False)
    return ConstraintSet(step_index=frs.step_index, kbar_p=split.kbar_p,
                         feasible=True, A=xc.A, b=xc.b, split=split)


def solve_subinterval(cs: ConstraintSet, phi: str = "zero", phi_ref: float = 0.5,
                      timeout_ms: float = TIMEOUT_MS_DEFAULT,
                      eps: float = EPS_MARGIN, deadline: float = None) -> dict:
    """One subinterval: feasible k_p* | infeasible | timeout.

    Starts at the endpoints and midpoint; each probe and the interval pass
    checks the wall clock so a timeout is honored within one iteration.
    """
    t0 = time.monotonic()
    if deadline is None:
        deadline = t0 + timeout_ms / 1e3

    def _out(status, k_p=None, reason="", iters=0):
        return {"status": status, "k_p": k_p,
                "phi": None if k_p is None else phi_value(phi, k_p, phi_ref),
                "reason": reason, "iters": iters,
                "ms": (time.monotonic() - t0) * 1e3}

    if not cs.feasible:
        return _out("infeasible", reason="buffer")

    lo, hi = cs.kbar_p
    iters = 0
    for start in (lo, 0.5 * (lo + hi), hi):
        iters += 1
        cs.c(start)
        if time.monotonic() > deadline:
            return _out("timeout", iters=iters)

    interval = cs.feasible_interval(eps)
    iters += 1
    if time.monotonic() > deadline:
        return _out("timeout", iters=iters)
    if interval is None:
        return _out("infeasible", reason="constraint", iters=iters)
    a, b = interval
    k_star = 0.5 * (a + b) if phi == "zero" else min(max(phi_ref, a), b)
    if cs.c(k_star) > -eps:
        return _out("infeasible", reason="constraint", iters=iters)
    return _out("feasible", k_p=float(k_star), iters=iters)


@dataclass
class PlanContext:
    """Read-only artifact bundle a plan() call works against."""

    params: ModelParams
    entry: RecoveryEntry
    target: TargetSet
    step_index: int
    artifacts: dict = None          # {(ih, ip): FrsArtifact} built at nominal q0
    n_sub: int = N_SUBINTERVALS

    def artifact_for(self, ih: int, ip: int, q0: Config | None) -> FrsArtifact:
        cached = (self.artifacts or {}).get((ih, ip))
        if cached is not None:
            if q0 is None or np.allclose(q0.q, cached.q0, atol=1e-12):
                return cached
        return build_frs(self.params, self.entry, self.step_index,
                         subinterval(ih, self.n_sub), subinterval(ip, self.n_sub),
                         q0=q0)


def load_artifacts(root, step_index: int, n_sub: int = N_SUBINTERVALS) -> dict:
    arts = {}
    for ih in range(n_sub):
        for ip in range(n_sub):
            arts[(ih, ip)] = FrsArtifact.load(frs_cache_path(root, step_index, ih, ip))
    return arts


@dataclass
class PlanResult:
    step_index: int
    ih: int
    outcomes: list
    chosen: dict | None
    status: str                     # feasible | plan-infeasible
    total_ms: float

    def to_dict(self) -> dict:
        return {"step_index": self.step_index, "ih": self.ih,
                "outcomes": self.outcomes, "chosen": self.chosen,
                "status": self.status, "total_ms": self.total_ms}


def plan(request: PlanRequest, ctx: PlanContext) -> PlanResult:
    """Sweep the parameter subintervals; keep the best certified answer.

    Per-subinterval wall clock covers assembly, constraint build, and the
    solve, so reach-set work counts against the same budget. Ties in the
    cost break toward the lowest subinterval index.
    """
    t_all = time.monotonic()
    outcomes = []
    chosen = None
    for ip in range(ctx.n_sub):
        t0 = time.monotonic()
        deadline = t0 + request.timeout_ms / 1e3
        art = ctx.artifact_for(request.ih, ip, request.q0)
        cs = build_constraint(art, ctx.target)
        out = solve_subinterval(cs, request.phi, request.phi_ref,
                                request.timeout_ms, deadline=deadline)
        out["ip"] = ip
        out["ms"] = (time.monotonic() - t0) * 1e3
        outcomes.append(out)
        if out["status"] == "feasible":
            if chosen is None or out["phi"] < chosen["phi"]:
                chosen = {"ip": ip, "k_p": out["k_p"], "phi": out["phi"]}
    return PlanResult(step_index=ctx.step_index, ih=request.ih,
                      outcomes=outcomes, chosen=chosen,
                      status="feasible" if chosen else "plan-infeasible",
                      total_ms=(time.monotonic() - t_all) * 1e3)


# ---------------------------------------------------------------------------
# reference emission


def make_reference(k_p_star: float, entry: RecoveryEntry, q_p0: float = None,
                   T1: float = None, T2: float = None, dt: float = 0.005,
                   hold: float = 0.01) -> TrajectoryRef:
    """Real-time knee reference from the unitless recovery parameter.

    Inverts the clock normalization with the stored reference durations
    (overridable when the actual stumble timing is known): positions pick
    up the onset angle through the zero-displacement origin, velocities
    rescale by 0.5/duration per segment. A short terminal hold pins the
    final angle so interpolation past the plan horizon stays put.
    """
    if not 0.0 <= k_p_star <= 1.0:
        raise ValueError("parameter must lie in [0, 1]")
    T1 = entry.T1_ref if T1 is None else float(T1)
    T2 = entry.T2_ref if T2 is None else float(T2)
    if T1 <= 0 or T2 <= 0:
        raise ValueError("segment durations must be positive")
    pt = eval_param_trajectory(entry, 0, PROSTHETIC_JOINT, k_p_star,
                               q0_joint=q_p0)

    n1 = max(2, int(round(T1 / dt)) + 1)
    n2 = max(2, int(round(T2 / dt)) + 1)
    tau1 = np.linspace(0.0, 0.5, n1)
    tau2 = np.linspace(0.5, 1.0, n2)[1:]
    t = np.concatenate([tau1 * (T1 / 0.5), T1 + (tau2 - 0.5) * (T2 / 0.5)])
    tau = np.concatenate([tau1, tau2])
    scale = np.where(tau <= 0.5 + 1e-12, 0.5 / T1, 0.5 / T2)

    q = np.zeros((len(t) + 1, 5))
    qd = np.zeros((len(t) + 1, 5))
    q[:-1, PROSTHETIC_JOINT] = pt.q(tau)
    qd[:-1, PROSTHETIC_JOINT] = pt.qdot_n(tau) * scale
    q[-1, PROSTHETIC_JOINT] = q[-2, PROSTHETIC_JOINT]
    t = np.append(t, t[-1] + hold)
    return TrajectoryRef(t=t, q=q, qd=qd)
