"""Parameter-selection soundness against grid scans and exact outcomes."""

import time

import numpy as np
import pytest

from stumblekit.geometry import PolytopeH, Zonotope2, minkowski_diff
from stumblekit.model import Config, Stance, default_params
from stumblekit.planner import (
    EPS_MARGIN,
    ConstraintSet,
    PlanContext,
    PlanRequest,
    build_constraint,
    make_reference,
    plan,
    solve_subinterval,
)
from stumblekit.reach import build_frs, buffer_split, subinterval
from stumblekit.recovery import RecoveryEntry, eval_param_trajectory
from stumblekit.targets import build_target_set, heel_strike_state, outcome_coordinates

pytestmark = []


def _entry(seed=21, scale=0.1):
    rng = np.random.default_rng(seed)
    return RecoveryEntry(step_length=0.5, coeffs=rng.normal(0, scale, (5, 2, 6)),
                         T1_ref=0.2, T2_ref=0.3,
                         q0=np.array([0.05, 0.3, -0.4, -0.25, -0.1]),
                         qd0=np.zeros(5), k_fit=[0.0, 0.5, 1.0],
                         k_holdout=[0.25], knee_velocities={}, residuals={})


def _target_around_outcomes(params, entry, pad=0.0, step_index=0):
    """Hull of the exact outcome lattice, optionally padded outward."""
    pts = []
    for kh in np.linspace(0, 1, 9):
        for kp in np.linspace(0, 1, 9):
            q1, qdn1, _ = heel_strike_state(entry, kh, kp)
            pts.append(outcome_coordinates(params, q1, qdn1))
    pts = np.asarray(pts)
    if pad:
        c = pts.mean(axis=0)
        pts = np.vstack([pts, c + (pts - c) * (1.0 + pad)])
    return build_target_set(pts, np.ones(len(pts), bool),
                            step_index=step_index, step_length=entry.step_length)


def _context(pad=0.25, budgets=(0.0, 0.0)):
    params = default_params()
    entry = _entry()
    target = _target_around_outcomes(params, entry, pad=pad)
    return params, entry, target


def test_identity_buffer_keeps_target_rows():
    params, entry, target = _context()
    art = build_frs(params, entry, 0, subinterval(4), subinterval(4),
                    pos_budget=0.0, vel_budget=0.0)
    # strip the buffer: only the k_p generator remains
    art.frs.plain = np.zeros((2, 0))
    art.frs.sliceable = [(p, g) for p, g in art.frs.sliceable if p == "k_p"]
    cs = build_constraint(art, target)
    assert cs.feasible
    assert np.allclose(cs.A, target.polytope.A)
    assert np.allclose(cs.b, target.polytope.b, atol=1e-12)


def test_overbuffer_reports_infeasible_by_buffer():
    params, entry, target = _context()
    art = build_frs(params, entry, 0, subinterval(4), subinterval(4))
    # inflate the buffer beyond the target inradius
    art.frs.plain = np.hstack([art.frs.plain, 10.0 * np.eye(2)])
    cs = build_constraint(art, target)
    assert not cs.feasible
    assert cs.c(0.45) == np.inf
    out = solve_subinterval(cs)
    assert out["status"] == "infeasible"
    assert out["reason"] == "buffer"


def test_step_mismatch_is_an_error():
    params, entry, target = _context()
    art = build_frs(params, entry, 3, subinterval(0), subinterval(0))
    with pytest.raises(ValueError, match="step"):
        build_constraint(art, target)


def test_solver_agrees_with_grid_scan():
    params, entry, target = _context(pad=0.15)
    for ip in range(10):
        art = build_frs(params, entry, 0, subinterval(5), subinterval(ip),
                        pos_budget=0.0, vel_budget=0.0)
        cs = build_constraint(art, target)
        out = solve_subinterval(cs)
        lo, hi = subinterval(ip)
        grid = np.linspace(lo, hi, 1000)
        cvals = np.array([cs.c(k) for k in grid])
        feas_grid = grid[cvals <= -EPS_MARGIN]
        if out["status"] == "feasible":
            assert cs.c(out["k_p"]) <= -EPS_MARGIN
            assert len(feas_grid), "solver claims feasible, scan disagrees"
            assert feas_grid.min() - 1e-3 <= out["k_p"] <= feas_grid.max() + 1e-3
        else:
            assert len(feas_grid) == 0, "scan found feasible points, solver missed"


def test_feasible_parameters_steer_outcomes_into_target():
    # for sampled k_p with c < 0, exact outcomes over the whole human
    # subinterval land inside the target polytope: zero violations
    params, entry, target = _context(pad=0.15)
    rng = np.random.default_rng(5)
    checked = 0
    for ip in (2, 5, 8):
        art = build_frs(params, entry, 0, subinterval(3), subinterval(ip),
                        pos_budget=0.0, vel_budget=0.0)
        cs = build_constraint(art, target)
        interval = cs.feasible_interval()
        if interval is None:
            continue
        for k_p in np.linspace(*interval, 12):
            for kh in rng.uniform(*subinterval(3), size=30):
                q1, qdn1, _ = heel_strike_state(entry, kh, k_p)
                pt = outcome_coordinates(params, q1, qdn1)
                assert target.polytope.margin(pt) <= 1e-9
                checked += 1
    assert checked > 0


def test_constraint_gradient_matches_finite_differences():
    params, entry, target = _context(pad=0.3)
    art = build_frs(params, entry, 0, subinterval(5), subinterval(5),
                    pos_budget=0.0, vel_budget=0.0)
    cs = build_constraint(art, target)
    rng = np.random.default_rng(6)
    h = 1e-7
    for k in rng.uniform(0.5, 0.6, 100):
        fd = (cs.c(k + h) - cs.c(k - h)) / (2 * h)
        an = cs.c_grad(k)
        # at active-set switches the derivative jumps; skip the kinks
        if abs(cs.c(k + h) - cs.c(k - h) - 2 * h * an) > 1e-12:
            continue
        assert an == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_constant_center_map_picks_midpoint():
    poly = PolytopeH(np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]]),
                     np.array([1.0, 1, 1, 1]))
    from stumblekit.reach import FrsArtifact, SliceableZonotope
    frs = SliceableZonotope(np.zeros(2), np.zeros((2, 0)),
                            [("k_h", np.array([0.05, 0.0]))])
    art = FrsArtifact(step_index=0, step_length=0.5, kbar_h=(0.0, 0.1),
                      kbar_p=(0.4, 0.5), q0=np.zeros(5), X_sw=frs, X_com=frs,
                      X_comv=frs, frs=frs, budgets={})
    ts = build_target_set(np.array([[1, 1], [-1, 1], [-1, -1], [1, -1.0]]),
                          np.ones(4, bool), step_index=0)
    cs = build_constraint(art, ts)
    out = solve_subinterval(cs)
    assert out["status"] == "feasible"
    assert out["k_p"] == pytest.approx(0.45)
    assert out["iters"] <= 4


def test_timeout_is_reported():
    cs = ConstraintSet(step_index=0, kbar_p=(0.0, 0.1), feasible=True,
                       A=np.array([[1.0, 0.0]]), b=np.array([1.0]))
    from stumblekit.reach import FrsArtifact, SliceableZonotope

    class _Split:
        kbar_p = (0.0, 0.1)

        def x_poly(self, k):
            time.sleep(0.002)
            return np.zeros(2)

        def grad(self):
            return np.zeros(2)

    cs.split = _Split()
    out = solve_subinterval(cs, timeout_ms=1.0)
    assert out["status"] == "timeout"
    assert out["ms"] >= 1.0


def test_plan_sweeps_and_picks_lowest_index_on_ties():
    params, entry, target = _context(pad=0.3)
    ctx = PlanContext(params=params, entry=entry, target=target, step_index=0)
    req = PlanRequest(step_index=0, ih=4)
    res = plan(req, ctx)
    assert len(res.outcomes) == 10
    assert all(o["ms"] >= 0 for o in res.outcomes)
    if res.status == "feasible":
        feas = [o for o in res.outcomes if o["status"] == "feasible"]
        best = min(f["phi"] for f in feas)
        first = next(f for f in feas if f["phi"] == best)
        assert res.chosen["ip"] == first["ip"]
        assert res.chosen["phi"] == best


def test_plan_is_deterministic_modulo_timing():
    params, entry, target = _context(pad=0.2)
    ctx = PlanContext(params=params, entry=entry, target=target, step_index=0)
    req = PlanRequest(step_index=0, ih=6, phi="quadratic", phi_ref=0.4)
    a, b = plan(req, ctx), plan(req, ctx)

    def strip(res):
        return [(o["ip"], o["status"], o["k_p"], o["phi"]) for o in res.outcomes]

    assert strip(a) == strip(b)
    assert a.chosen == b.chosen
    assert a.status == b.status


def test_plan_uses_prebuilt_artifacts_when_q0_matches():
    params, entry, target = _context(pad=0.2)
    arts = {(2, ip): build_frs(params, entry, 0, subinterval(2), subinterval(ip))
            for ip in range(10)}
    ctx = PlanContext(params=params, entry=entry, target=target, step_index=0,
                      artifacts=arts)
    req = PlanRequest(step_index=0, ih=2)
    res = plan(req, ctx)
    ctx_fresh = PlanContext(params=params, entry=entry, target=target, step_index=0)
    res2 = plan(req, ctx_fresh)
    assert [o["status"] for o in res.outcomes] == [o["status"] for o in res2.outcomes]
    ks = [(o["k_p"], p["k_p"]) for o, p in zip(res.outcomes, res2.outcomes)
          if o["k_p"] is not None]
    for a, b in ks:
        assert a == pytest.approx(b, abs=1e-12)


def test_request_validation():
    with pytest.raises(ValueError):
        PlanRequest(step_index=0, ih=10)
    with pytest.raises(ValueError):
        PlanRequest(step_index=0, ih=0, timeout_ms=0.0)
    with pytest.raises(ValueError):
        PlanRequest(step_index=0, ih=0, phi="cubic")


def test_reference_matches_closed_form_at_nodes():
    entry = _entry(seed=30)
    k = 0.62
    T1, T2 = 0.18, 0.27
    ref = make_reference(k, entry, T1=T1, T2=T2, dt=0.004)
    pt = eval_param_trajectory(entry, 0, 4, k)
    for i, t in enumerate(ref.t[:-1]):
        tau = 0.5 * t / T1 if t <= T1 + 1e-12 else 0.5 + 0.5 * (t - T1) / T2
        assert ref.q[i, 4] == pytest.approx(pt.q(tau), abs=1e-9)
        scale = 0.5 / T1 if tau <= 0.5 + 1e-12 else 0.5 / T2
        assert ref.qd[i, 4] == pytest.approx(float(pt.qdot_n(tau)) * scale, abs=1e-9)


def test_reference_endpoint_hits_polynomial_end_state():
    entry = _entry(seed=31)
    k = 0.3
    ref = make_reference(k, entry)
    pt = eval_param_trajectory(entry, 0, 4, k)
    q_end, qdn_end = pt.end_state
    i_end = len(ref.t) - 2  # last sampled node before the terminal hold
    assert ref.t[i_end] == pytest.approx(entry.T1_ref + entry.T2_ref, abs=1e-12)
    assert ref.q[i_end, 4] == pytest.approx(q_end, abs=1e-9)
    assert ref.qd[i_end, 4] == pytest.approx(qdn_end * 0.5 / entry.T2_ref, abs=1e-9)


def test_reference_onset_continuity():
    entry = _entry(seed=32)
    ref = make_reference(0.5, entry, q_p0=-0.123)
    assert ref.q[0, 4] == pytest.approx(-0.123, abs=1e-12)
    ref2 = make_reference(0.5, entry)
    assert ref2.q[0, 4] == pytest.approx(entry.q0[4], abs=1e-12)


def test_reference_rejects_bad_inputs():
    entry = _entry(seed=33)
    with pytest.raises(ValueError):
        make_reference(1.2, entry)
    with pytest.raises(ValueError):
        make_reference(0.5, entry, T1=0.0)
