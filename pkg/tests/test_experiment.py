"""Sweep plumbing: seeded streams, provenance gate, report rendering."""

import csv
import json
import os

import numpy as np
import pytest

from stumblekit.artifacts import file_sha256
from stumblekit.experiment import (
    ExperimentConfig,
    ExperimentReport,
    ProvenanceError,
    check_provenance,
    evaluate_thresholds,
    render_report,
    rng_for,
)
from stumblekit.model import default_params
from stumblekit.reach import build_frs, frs_cache_path
from stumblekit.recovery import (
    NormalizedTrajectory,
    RecoveryEntry,
    RecoveryPolyLib,
    entry_from_trials_doc,
    fit_recovery_polynomials,
)


def _entry(rng=None, scale=0.1, step_length=0.5):
    coeffs = np.zeros((5, 2, 6)) if rng is None else rng.normal(0, scale, (5, 2, 6))
    return RecoveryEntry(step_length=step_length, coeffs=coeffs,
                         T1_ref=0.2, T2_ref=0.3,
                         q0=np.array([0.05, 0.3, -0.4, -0.25, -0.1]),
                         qd0=np.zeros(5), k_fit=[0.0, 0.5, 1.0],
                         k_holdout=[0.25], knee_velocities={}, residuals={})


def test_rng_for_repeatable_and_distinct():
    a = rng_for(7, 3, 4).uniform(size=5)
    b = rng_for(7, 3, 4).uniform(size=5)
    assert np.array_equal(a, b)
    c = rng_for(7, 3, 5).uniform(size=5)
    d = rng_for(8, 3, 4).uniform(size=5)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_for_order_independent():
    # drawing cell (2, 9) never depends on whether other cells drew first
    first = rng_for(0, 2, 9).uniform(size=3)
    rng_for(0, 1, 1).uniform(size=100)
    again = rng_for(0, 2, 9).uniform(size=3)
    assert np.array_equal(first, again)


def test_config_validation(tmp_path):
    g = tmp_path / "g.json"
    r = tmp_path / "r.json"
    t = tmp_path / "t.json"
    for p in (g, r, t):
        p.write_text("{}")
    frs = tmp_path / "frs"
    frs.mkdir()
    cfg = ExperimentConfig(str(g), str(r), str(t), str(frs))
    assert cfg.n_sub >= 1
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(str(tmp_path / "nope.json"), str(r), str(t), str(frs))
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(str(g), str(r), str(t), str(tmp_path / "nodir"))
    with pytest.raises(ValueError):
        ExperimentConfig(str(g), str(r), str(t), str(frs), samples_per_cell=0)


def _cfg_with_artifact(tmp_path, provenance):
    params = default_params()
    entry = _entry(np.random.default_rng(5), scale=0.05)
    lib = RecoveryPolyLib([entry])
    rpath = tmp_path / "recovery.json"
    lib.save(str(rpath))
    gpath = tmp_path / "gaits.json"
    gpath.write_text("{\"gaits\": []}")
    tpath = tmp_path / "targets.json"
    tpath.write_text("{\"sets\": []}")
    frs_root = tmp_path / "frs"
    frs_root.mkdir()
    if provenance == "match":
        provenance = file_sha256(str(rpath))
    art = build_frs(params, entry, step_index=0, kbar_h=(0.0, 0.1),
                    kbar_p=(0.0, 0.1), provenance=provenance)
    art.save(frs_cache_path(str(frs_root), 0, 0, 0))
    return ExperimentConfig(str(gpath), str(rpath), str(tpath), str(frs_root))


def test_provenance_match_passes(tmp_path):
    cfg = _cfg_with_artifact(tmp_path, "match")
    hashes = check_provenance(cfg, [0])
    assert hashes["recovery"] == file_sha256(cfg.recovery_path)
    assert set(hashes) == {"gaits", "recovery", "targets"}


def test_provenance_mismatch_raises(tmp_path):
    cfg = _cfg_with_artifact(tmp_path, "0" * 64)
    with pytest.raises(ProvenanceError, match="cites recovery lib"):
        check_provenance(cfg, [0])


def test_provenance_missing_artifact_raises(tmp_path):
    cfg = _cfg_with_artifact(tmp_path, "match")
    with pytest.raises(ProvenanceError, match="missing"):
        check_provenance(cfg, [0, 3])


def _report(rates, feasible=60, total=100, sub_max=10.0, tests=True):
    per_arm = {"trip-rtd": 30 if tests else 0, "nominal": 30 if tests else 0}
    return ExperimentReport(
        config={}, provenance={},
        counts={"cells_total": total, "cells_feasible": feasible,
                "tests_run": sum(per_arm.values()), "tests_per_arm": per_arm},
        rates=rates,
        timing={"plan_ms_mean": 5.0, "plan_ms_max": 20.0,
                "sub_ms_mean": 2.0, "sub_ms_max": sub_max})


def test_thresholds_clean():
    rep = _report({"trip-rtd": 1.0, "nominal": 0.05})
    assert evaluate_thresholds(rep) == []


def test_thresholds_each_breach():
    rep = _report({"trip-rtd": 0.80, "nominal": 0.05})
    assert any("trip-rtd" in b for b in evaluate_thresholds(rep))
    rep = _report({"trip-rtd": 1.0, "nominal": 0.5})
    assert any("nominal" in b for b in evaluate_thresholds(rep))
    rep = _report({"trip-rtd": 1.0, "nominal": 0.0}, feasible=95)
    assert any("feasible" in b for b in evaluate_thresholds(rep))
    rep = _report({"trip-rtd": 1.0, "nominal": 0.0}, sub_max=400.0)
    assert any("subinterval" in b for b in evaluate_thresholds(rep))
    # no trials run: success-rate thresholds are vacuous, not breached
    rep = _report({"trip-rtd": 0.0, "nominal": 0.0}, tests=False)
    assert evaluate_thresholds(rep) == []


def test_report_roundtrip(tmp_path):
    rep = _report({"trip-rtd": 1.0, "nominal": 0.0})
    rep.cells = [{"step_index": 0, "ih": 1, "status": "feasible",
                  "chosen": {"ip": 2, "k_p": 0.5, "phi": 0.0},
                  "step_length": 0.5, "plan_ms": 3.0,
                  "outcomes": [{"ip": 2, "status": "feasible", "k_p": 0.5,
                                "phi": 0.0, "reason": None, "ms": 1.5}]}]
    rep.trials = [{"step_index": 0, "step_length": 0.5, "ih": 1, "sample": 0,
                   "arm": "trip-rtd", "k_h": 0.3, "k_p": 0.5, "ip": 2,
                   "episode_outcome": "converged", "walk": "completed",
                   "success": True}]
    path = tmp_path / "report.json"
    rep.save(str(path))
    back = ExperimentReport.load(str(path))
    assert back.to_dict() == rep.to_dict()


def test_render_report_files(tmp_path):
    rep = _report({"trip-rtd": 1.0, "nominal": 0.0})
    rep.cells = [{"step_index": 0, "ih": 0, "status": "feasible",
                  "chosen": {"ip": 1, "k_p": 0.4, "phi": 0.0},
                  "step_length": 0.5, "plan_ms": 2.0,
                  "outcomes": [
                      {"ip": 0, "status": "infeasible", "k_p": None,
                       "phi": None, "reason": "constraint", "ms": 0.8},
                      {"ip": 1, "status": "feasible", "k_p": 0.4,
                       "phi": 0.0, "reason": None, "ms": 1.2}]}]
    rep.trials = [{"step_index": 0, "step_length": 0.5, "ih": 0, "sample": s,
                   "arm": arm, "k_h": 0.2, "k_p": 0.4, "ip": 1,
                   "episode_outcome": "converged", "walk": "completed",
                   "success": arm == "trip-rtd"}
                  for s in range(2) for arm in ("trip-rtd", "nominal")]
    paths = render_report(rep, str(tmp_path / "out"))
    for key in ("summary", "results", "timing"):
        assert os.path.exists(paths[key]), key

    with open(paths["results"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert set(rows[0]) == {"step_index", "step_length", "ih", "sample",
                            "arm", "k_h", "k_p", "ip", "episode_outcome",
                            "walk", "success"}
    with open(paths["timing"]) as fh:
        trows = list(csv.reader(fh))
    assert trows[0] == ["step_index", "ih", "ip", "status", "ms"]
    assert len(trows) == 3
    text = open(paths["summary"]).read()
    assert "success rates" in text and "subinterval wall" in text


def _fake_norm(rng, n=25):
    tau = np.sort(np.concatenate([[0.0, 0.5, 1.0], rng.uniform(0, 1, n - 3)]))
    return {"tau": tau.tolist(),
            "qdot_n": rng.normal(0, 0.5, (len(tau), 5)).tolist(),
            "qtilde": rng.normal(0, 0.3, (len(tau), 5)).tolist(),
            "durations": [0.2, 0.3],
            "q0": [0.05, 0.3, -0.4, -0.25, -0.1],
            "qd0": rng.normal(0, 1, 5).tolist()}


def test_trials_doc_fit_matches_direct_fit():
    rng = np.random.default_rng(11)
    ks = np.linspace(0.0, 1.0, 10).tolist()
    doc = {"step_index": 2, "step_length": 0.45, "dt": 1e-3, "trials": []}
    norms = []
    for i, k in enumerate(ks):
        nd = _fake_norm(rng)
        norms.append(nd)
        doc["trials"].append({"config_index": i + 1, "k": k,
                              "knee_velocity": -1.0, "success": True,
                              "normalized": nd})
    doc["trials"].append({"config_index": 11, "k": 0.9,
                          "knee_velocity": None, "success": False})
    entry = entry_from_trials_doc(doc)

    objs = [NormalizedTrajectory(
        tau=np.array(nd["tau"]), qdot_n=np.array(nd["qdot_n"]),
        qtilde=np.array(nd["qtilde"]), durations=tuple(nd["durations"]),
        q0=np.array(nd["q0"]), k=k) for nd, k in zip(norms, ks)]
    direct = fit_recovery_polynomials(objs, ks, 0.45)

    assert np.allclose(entry.coeffs, direct.coeffs, atol=1e-12)
    assert entry.T1_ref == direct.T1_ref and entry.T2_ref == direct.T2_ref
    assert np.allclose(entry.qd0, norms[0]["qd0"])
    assert entry.knee_velocities[11] is None
    assert entry.knee_velocities[1] == -1.0


def test_trials_doc_too_few_successes():
    rng = np.random.default_rng(3)
    doc = {"step_index": 0, "step_length": 0.3, "dt": 1e-3,
           "trials": [{"config_index": i + 1, "k": k, "knee_velocity": -1.0,
                       "success": True, "normalized": _fake_norm(rng)}
                      for i, k in enumerate([0.0, 0.5, 1.0])]}
    from stumblekit.recovery import RecoveryFitError
    with pytest.raises(RecoveryFitError):
        entry_from_trials_doc(doc)
