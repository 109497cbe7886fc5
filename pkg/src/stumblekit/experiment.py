"""Full stumble-recovery sweep: plan each cell, simulate, aggregate.

Randomness is counter-based: every draw names its cell coordinates, so any
subset of the sweep reproduces the full run's samples regardless of
execution order or worker count.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import simulate
from .artifacts import file_sha256
from .gaits import GaitLibrary
from .geometry import Zonotope2
from .model import default_params
from .planner import PlanContext, PlanRequest, load_artifacts, make_reference, plan
from .reach import N_SUBINTERVALS, frs_cache_path, FrsArtifact, buffer_split
from .recovery import WALK_CHECK_STEPS, RecoveryPolyLib, completion_policy
from .targets import TargetLibrary


@dataclass
class ExperimentConfig:
    gaits_path: str
    recovery_path: str
    targets_path: str
    frs_root: str
    n_sub: int = N_SUBINTERVALS
    samples_per_cell: int = 3
    seed: int = 0
    timeout_ms: float = 75.0
    phi: str = "zero"
    walk_steps: int = WALK_CHECK_STEPS
    step_indices: tuple = None      # None = all library entries
    reference_timing_ms: tuple = (69.7, 101.0)  # comparison baseline (mean, max)

    def __post_init__(self):
        if self.n_sub < 1 or self.samples_per_cell < 1:
            raise ValueError("counts must be >= 1")
        for p in (self.gaits_path, self.recovery_path, self.targets_path):
            if not os.path.exists(p):
                raise FileNotFoundError(p)
        if not os.path.isdir(self.frs_root):
            raise FileNotFoundError(self.frs_root)


def rng_for(seed: int, *ids) -> np.random.Generator:
    """Counter-based stream: same (seed, ids) -> same draws on any machine."""
    counter = np.zeros(4, dtype=np.uint64)
    for i, v in enumerate(ids[:3]):
        counter[i + 1] = np.uint64(v)
    key = np.array([np.uint64(seed), np.uint64(0)])
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


@dataclass
class ExperimentReport:
    config: dict
    provenance: dict
    cells: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "provenance": self.provenance,
                "cells": self.cells, "trials": self.trials,
                "counts": self.counts, "rates": self.rates,
                "timing": self.timing}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @staticmethod
    def load(path) -> "ExperimentReport":
        with open(path) as fh:
            doc = json.load(fh)
        return ExperimentReport(**doc)


class ProvenanceError(RuntimeError):
    pass


def check_provenance(cfg: ExperimentConfig, step_indices) -> dict:
    """Every reach artifact must cite the recovery library it was built from."""
    recovery_hash = file_sha256(cfg.recovery_path)
    for si in step_indices:
        probe = frs_cache_path(cfg.frs_root, si, 0, 0)
        if not os.path.exists(probe):
            raise ProvenanceError(f"missing reach artifact {probe}")
        art = FrsArtifact.load(probe)
        if art.provenance and art.provenance != recovery_hash:
            raise ProvenanceError(
                f"reach cache for step {si} cites recovery lib "
                f"{art.provenance[:12]}, current file is {recovery_hash[:12]}")
    return {"gaits": file_sha256(cfg.gaits_path),
            "recovery": recovery_hash,
            "targets": file_sha256(cfg.targets_path)}


def _knee_reference_policy(entry, k_p_star):
    """TRIP arm: time-anchored knee reference resolved at stumble onset."""

    def policy(state, t):
        ref = make_reference(k_p_star, entry, q_p0=float(state.q[4]))
        return simulate.time_pd(ref)

    return policy


def run_trial_pair(params, gait, entry, k_h: float, k_p_star: float,
                   walk_steps: int = WALK_CHECK_STEPS) -> list:
    """One sampled stumble simulated under both knee controllers."""
    rows = []
    human = completion_policy(params, gait, k_h)
    arms = (("trip-rtd", _knee_reference_policy(entry, k_p_star)),
            ("nominal", simulate.phase_pd(gait)))
    for arm, knee in arms:
        log = simulate.toe_catch_episode(params, gait, knee_policy=knee,
                                         human_policy=human)
        success = log.outcome == "converged" and log.post_impact is not None
        walk_reason = "episode-" + log.outcome
        if success:
            walk = simulate.simulate_walk(params, gait, log.post_impact, walk_steps)
            success = bool(walk["converged"])
            walk_reason = walk["reason"]
        rows.append({"arm": arm, "k_h": float(k_h), "k_p": float(k_p_star),
                     "episode_outcome": log.outcome, "walk": walk_reason,
                     "success": bool(success)})
    return rows


def run_experiment(cfg: ExperimentConfig, verbose: bool = False) -> ExperimentReport:
    params = default_params()
    gaits = GaitLibrary.load(cfg.gaits_path)
    recovery = RecoveryPolyLib.load(cfg.recovery_path)
    targets = TargetLibrary.load(cfg.targets_path)
    step_indices = (tuple(range(len(recovery)))
                    if cfg.step_indices is None else tuple(cfg.step_indices))
    provenance = check_provenance(cfg, step_indices)

    report = ExperimentReport(
        config={"n_sub": cfg.n_sub, "samples_per_cell": cfg.samples_per_cell,
                "seed": cfg.seed, "timeout_ms": cfg.timeout_ms, "phi": cfg.phi,
                "walk_steps": cfg.walk_steps,
                "step_indices": list(step_indices),
                "reference_timing_ms": list(cfg.reference_timing_ms)},
        provenance=provenance)

    plan_ms, sub_ms = [], []
    n_feasible = 0
    n_tests = {"trip-rtd": 0, "nominal": 0}
    n_success = {"trip-rtd": 0, "nominal": 0}

    for si in step_indices:
        entry = recovery[si]
        gait = gaits.nearest(entry.step_length)
        target = targets.sets[si]
        artifacts = load_artifacts(cfg.frs_root, si, cfg.n_sub)
        ctx = PlanContext(params=params, entry=entry, target=target,
                          step_index=si, artifacts=artifacts, n_sub=cfg.n_sub)
        for ih in range(cfg.n_sub):
            req = PlanRequest(step_index=si, ih=ih, phi=cfg.phi,
                              timeout_ms=cfg.timeout_ms, n_sub=cfg.n_sub)
            res = plan(req, ctx)
            plan_ms.append(res.total_ms)
            sub_ms.extend(o["ms"] for o in res.outcomes)
            cell = {"step_index": si, "step_length": entry.step_length,
                    "ih": ih, "status": res.status,
                    "chosen": res.chosen, "plan_ms": res.total_ms,
                    "outcomes": [{k: o[k] for k in
                                  ("ip", "status", "k_p", "phi", "reason", "ms")}
                                 for o in res.outcomes]}
            report.cells.append(cell)
            if res.status != "feasible":
                continue
            n_feasible += 1
            k_p_star = res.chosen["k_p"]
            rng = rng_for(cfg.seed, si, ih)
            kh_lo, kh_hi = req.kbar_h
            for t_i in range(cfg.samples_per_cell):
                k_h = float(rng.uniform(kh_lo, kh_hi))
                rows = run_trial_pair(params, gait, entry, k_h, k_p_star,
                                      cfg.walk_steps)
                for row in rows:
                    row.update({"step_index": si,
                                "step_length": entry.step_length,
                                "ih": ih, "sample": t_i,
                                "ip": res.chosen["ip"]})
                    report.trials.append(row)
                    n_tests[row["arm"]] += 1
                    n_success[row["arm"]] += int(row["success"])
            if verbose:
                print(f"cell L={entry.step_length:.2f} ih={ih}: "
                      f"k_p*={k_p_star:.3f} "
                      f"({n_success['trip-rtd']}/{n_tests['trip-rtd']} trip ok)",
                      flush=True)
        if verbose:
            print(f"step {si} complete: feasible so far {n_feasible}", flush=True)

    report.counts = {"cells_total": len(report.cells),
                     "cells_feasible": n_feasible,
                     "tests_run": n_tests["trip-rtd"] + n_tests["nominal"],
                     "tests_per_arm": n_tests}
    report.rates = {
        arm: (n_success[arm] / n_tests[arm]) if n_tests[arm] else 0.0
        for arm in ("trip-rtd", "nominal")}
    report.timing = {
        "plan_ms_mean": float(np.mean(plan_ms)) if plan_ms else 0.0,
        "plan_ms_max": float(np.max(plan_ms)) if plan_ms else 0.0,
        "sub_ms_mean": float(np.mean(sub_ms)) if sub_ms else 0.0,
        "sub_ms_max": float(np.max(sub_ms)) if sub_ms else 0.0}
    return report


# ---------------------------------------------------------------------------
# rendering


def evaluate_thresholds(report: ExperimentReport, timeout_ms: float = 75.0) -> list:
    """Breach list against the published sweep expectations (empty = pass)."""
    breaches = []
    rates = report.rates
    counts = report.counts
    if counts.get("tests_per_arm", {}).get("trip-rtd", 0):
        if rates["trip-rtd"] < 0.95:
            breaches.append(f"trip-rtd success {rates['trip-rtd']:.3f} < 0.95")
        if rates["nominal"] > 0.10:
            breaches.append(f"nominal success {rates['nominal']:.3f} > 0.10")
    total = counts.get("cells_total", 0)
    feas = counts.get("cells_feasible", 0)
    if total == 100 and not 50 <= feas <= 90:
        breaches.append(f"feasible cells {feas} outside [50, 90]")
    if report.timing.get("sub_ms_max", 0.0) > timeout_ms * 2:
        breaches.append(
            f"subinterval wall {report.timing['sub_ms_max']:.1f} ms "
            f"far beyond the {timeout_ms:.0f} ms budget")
    return breaches


def render_report(report: ExperimentReport, out_dir) -> dict:
    """summary.txt + results.csv + timing.csv + plot-data JSON."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"summary": os.path.join(out_dir, "summary.txt"),
             "results": os.path.join(out_dir, "results.csv"),
             "timing": os.path.join(out_dir, "timing.csv"),
             "plotdata": os.path.join(out_dir, "plotdata.json")}

    res_cols = ["step_index", "step_length", "ih", "sample", "arm", "k_h",
                "k_p", "ip", "episode_outcome", "walk", "success"]
    with open(paths["results"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=res_cols, extrasaction="ignore")
        w.writeheader()
        for row in report.trials:
            w.writerow(row)

    tim_cols = ["step_index", "ih", "ip", "status", "ms"]
    with open(paths["timing"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(tim_cols)
        for cell in report.cells:
            for o in cell["outcomes"]:
                w.writerow([cell["step_index"], cell["ih"], o["ip"],
                            o["status"], f"{o['ms']:.3f}"])

    counts, rates, timing = report.counts, report.rates, report.timing
    ref = report.config.get("reference_timing_ms") or [float("nan")] * 2
    lines = [
        "stumble-recovery sweep",
        f"cells: {counts.get('cells_total', 0)} total, "
        f"{counts.get('cells_feasible', 0)} feasible",
        f"tests: {counts.get('tests_run', 0)} "
        f"({counts.get('tests_per_arm', {})})",
        f"success rates: trip-rtd {rates.get('trip-rtd', 0.0):.3f}, "
        f"nominal {rates.get('nominal', 0.0):.3f}",
        f"plan wall: mean {timing.get('plan_ms_mean', 0.0):.1f} ms, "
        f"max {timing.get('plan_ms_max', 0.0):.1f} ms",
        f"subinterval wall: mean {timing.get('sub_ms_mean', 0.0):.1f} ms, "
        f"max {timing.get('sub_ms_max', 0.0):.1f} ms "
        f"(baseline {ref[0]:.1f}/{ref[1]:.1f} ms)",
        f"provenance: {json.dumps(report.provenance)}",
    ]
    with open(paths["summary"], "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return paths


def plot_data(report: ExperimentReport, targets: TargetLibrary,
              frs_root: str, out_path) -> dict:
    """Target polygons plus the sliced reach set of each first feasible cell."""
    doc = {"steps": []}
    by_step = {}
    for cell in report.cells:
        by_step.setdefault(cell["step_index"], []).append(cell)
    for si, cells in sorted(by_step.items()):
        target = targets.sets[si]
        entry_doc = {"step_index": si,
                     "step_length": cells[0]["step_length"],
                     "target_vertices": target.polytope.vertices().tolist(),
                     "frs_slices": []}
        for cell in cells:
            if cell["status"] != "feasible":
                continue
            art = FrsArtifact.load(frs_cache_path(
                frs_root, si, cell["ih"], cell["chosen"]["ip"]))
            split = buffer_split(art)
            k_p = cell["chosen"]["k_p"]
            zono = split.X_buf + Zonotope2(split.x_poly(k_p),
                                           np.zeros((2, 0)))
            entry_doc["frs_slices"].append({
                "ih": cell["ih"], "ip": cell["chosen"]["ip"], "k_p": k_p,
                "vertices": zono.to_polygon().tolist()})
            break
        doc["steps"].append(entry_doc)
    with open(out_path, "w") as fh:
        json.dump(doc, fh)
    return doc
