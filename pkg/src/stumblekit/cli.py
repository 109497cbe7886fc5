"""Command-line pipeline: artifact generation, planning, and the sweep.

Exit codes: 0 success, 2 acceptance-threshold breach, 3 provenance mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .artifacts import file_sha256
from .experiment import (
    ExperimentConfig,
    ExperimentReport,
    ProvenanceError,
    evaluate_thresholds,
    plot_data,
    render_report,
    run_experiment,
)
from .gaits import DEFAULT_STEP_LENGTHS, GaitLibrary, GaitSynthesisError, synthesize_gait
from .model import Config, Stance, default_params
from .planner import PlanContext, PlanRequest, load_artifacts, make_reference, plan
from .reach import N_SUBINTERVALS, build_frs_cache
from .recovery import (
    RecoveryPolyLib,
    build_recovery_entry,
    entry_from_trials_doc,
    step_trials_doc,
)
from .targets import TargetLibrary, build_target_library


def _cmd_gait_gen(args) -> int:
    params = default_params()
    lengths = ([float(args.length)] if args.length is not None
               else [float(L) for L in DEFAULT_STEP_LENGTHS])
    z = np.load(args.warm) if args.warm else None
    gaits, failures = [], []
    for L in lengths:
        try:
            g = synthesize_gait(params, L, z0=z, verify=not args.no_verify)
            z = g._z_solution
            gaits.append(g)
            print(f"gait L={L:.2f}: periods {np.round(g.step_periods, 3)}, "
                  f"certificate {g.certificate:.3f}", flush=True)
        except GaitSynthesisError as exc:
            failures.append((L, str(exc)))
            print(f"gait L={L:.2f} failed: {exc}", file=sys.stderr, flush=True)
    GaitLibrary(gaits).save(args.out)
    print(f"wrote {len(gaits)} gaits to {args.out}")
    return 0 if not failures else 2


def _cmd_stumble_gen(args) -> int:
    params = default_params()
    gaits = GaitLibrary.load(args.gaits)
    indices = [args.step_index] if args.step_index is not None else range(len(gaits))
    os.makedirs(args.out, exist_ok=True)
    for si in indices:
        gait = gaits[si]
        entry, trials = build_recovery_entry(params, gait, si,
                                             verbose=args.verbose)
        doc = step_trials_doc(si, gait, trials)
        path = os.path.join(args.out, f"trials_{si:02d}.json")
        with open(path, "w") as fh:
            json.dump(doc, fh)
        n_ok = sum(1 for t in trials if t.success)
        print(f"step {si} (L={gait.step_length:.2f}): "
              f"{n_ok}/{len(trials)} trials converged -> {path}", flush=True)
    return 0


def _cmd_stumble_fit(args) -> int:
    docs = []
    for path in sorted(args.trials):
        with open(path) as fh:
            docs.append(json.load(fh))
    docs.sort(key=lambda d: d["step_index"])
    entries = [entry_from_trials_doc(d) for d in docs]
    RecoveryPolyLib(entries).save(args.out)
    print(f"fitted {len(entries)} entries -> {args.out}")
    return 0


def _cmd_targetset_build(args) -> int:
    params = default_params()
    gaits = GaitLibrary.load(args.gaits)
    recovery = RecoveryPolyLib.load(args.lib)
    grid = (args.grid, args.grid)
    lib = build_target_library(params, gaits, recovery, grid=grid,
                               verbose=args.verbose)
    lib.save(args.out)
    print(f"wrote {len(lib.sets)} target sets -> {args.out}")
    return 0


def _cmd_frs_precompute(args) -> int:
    params = default_params()
    recovery = RecoveryPolyLib.load(args.lib)
    provenance = file_sha256(args.lib)
    n = build_frs_cache(params, recovery, args.out, n_sub=args.n_sub,
                        provenance=provenance, verbose=args.verbose)
    print(f"wrote {n} reach artifacts -> {args.out}")
    return 0


def _cmd_plan(args) -> int:
    params = default_params()
    recovery = RecoveryPolyLib.load(args.lib)
    targets = TargetLibrary.load(args.targets)
    lengths = [e.step_length for e in recovery.entries]
    si = (int(args.step_index) if args.step_index is not None
          else int(np.argmin(np.abs(np.array(lengths) - args.step))))
    entry = recovery[si]
    q0 = None
    if args.q0:
        with open(args.q0) as fh:
            q0 = Config(np.array(json.load(fh)["q"]), Stance.PROSTHETIC)
    artifacts = load_artifacts(args.frs, si, args.n_sub) if args.frs else None
    ctx = PlanContext(params=params, entry=entry, target=targets.sets[si],
                      step_index=si, artifacts=artifacts, n_sub=args.n_sub)
    req = PlanRequest(step_index=si, ih=args.khbar, q0=q0, phi=args.phi,
                      timeout_ms=args.timeout_ms, n_sub=args.n_sub)
    res = plan(req, ctx)
    out = res.to_dict()
    if res.chosen is not None:
        ref = make_reference(res.chosen["k_p"], entry,
                             q_p0=None if q0 is None else float(q0.q[4]))
        out["reference"] = {"t": ref.t.tolist(),
                            "q_knee": ref.q[:, 4].tolist(),
                            "qd_knee": ref.qd[:, 4].tolist()}
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=1)
    print(f"plan: {res.status}"
          + (f", k_p*={res.chosen['k_p']:.4f} "
             f"(subinterval {res.chosen['ip']})" if res.chosen else ""))
    return 0


def _cmd_experiment_run(args) -> int:
    cfg = ExperimentConfig(
        gaits_path=args.gaits, recovery_path=args.lib,
        targets_path=args.targets, frs_root=args.frs,
        n_sub=args.n_sub, samples_per_cell=args.samples,
        seed=args.seed, timeout_ms=args.timeout_ms)
    try:
        report = run_experiment(cfg, verbose=args.verbose)
    except ProvenanceError as exc:
        print(f"provenance mismatch: {exc}", file=sys.stderr)
        return 3
    report.save(args.out)
    print(f"report -> {args.out}")
    if args.render:
        paths = render_report(report, args.render)
        targets = TargetLibrary.load(args.targets)
        plot_data(report, targets, args.frs,
                  os.path.join(args.render, "plotdata.json"))
        print(f"rendered -> {paths['summary']}")
    breaches = evaluate_thresholds(report, args.timeout_ms)
    for b in breaches:
        print(f"threshold breach: {b}", file=sys.stderr)
    return 2 if breaches else 0


def _cmd_report_render(args) -> int:
    report = ExperimentReport.load(args.report)
    paths = render_report(report, args.out)
    if args.targets and args.frs:
        targets = TargetLibrary.load(args.targets)
        plot_data(report, targets, args.frs,
                  os.path.join(args.out, "plotdata.json"))
    print(f"rendered -> {paths['summary']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stumblekit",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="group", required=True)

    gait = sub.add_parser("gait", help="nominal gait library")
    gait_sub = gait.add_subparsers(dest="cmd", required=True)
    gen = gait_sub.add_parser("gen", help="synthesize the gait library")
    gen.add_argument("--out", required=True)
    gen.add_argument("--length", type=float, default=None,
                     help="single step length instead of the default ten")
    gen.add_argument("--warm", default=None, help="warm-start .npy")
    gen.add_argument("--no-verify", action="store_true")
    gen.set_defaults(func=_cmd_gait_gen)

    stumble = sub.add_parser("stumble", help="toe-catch data and fitting")
    st_sub = stumble.add_subparsers(dest="cmd", required=True)
    sgen = st_sub.add_parser("gen", help="generate trial documents")
    sgen.add_argument("--gaits", required=True)
    sgen.add_argument("--out", required=True, help="output directory")
    sgen.add_argument("--step-index", type=int, default=None)
    sgen.add_argument("--verbose", action="store_true")
    sgen.set_defaults(func=_cmd_stumble_gen)
    sfit = st_sub.add_parser("fit", help="fit the polynomial library")
    sfit.add_argument("--trials", nargs="+", required=True)
    sfit.add_argument("--out", required=True)
    sfit.set_defaults(func=_cmd_stumble_fit)

    tset = sub.add_parser("targetset", help="target polytopes")
    ts_sub = tset.add_subparsers(dest="cmd", required=True)
    tbuild = ts_sub.add_parser("build")
    tbuild.add_argument("--gaits", required=True)
    tbuild.add_argument("--lib", required=True)
    tbuild.add_argument("--grid", type=int, default=21)
    tbuild.add_argument("--out", required=True)
    tbuild.add_argument("--verbose", action="store_true")
    tbuild.set_defaults(func=_cmd_targetset_build)

    frs = sub.add_parser("frs", help="reachable-set cache")
    frs_sub = frs.add_subparsers(dest="cmd", required=True)
    fpre = frs_sub.add_parser("precompute")
    fpre.add_argument("--lib", required=True)
    fpre.add_argument("--out", required=True)
    fpre.add_argument("--n-sub", type=int, default=N_SUBINTERVALS)
    fpre.add_argument("--verbose", action="store_true")
    fpre.set_defaults(func=_cmd_frs_precompute)

    pl = sub.add_parser("plan", help="single online plan")
    pl.add_argument("--gaits", required=False, default=None)
    pl.add_argument("--lib", required=True)
    pl.add_argument("--targets", required=True)
    pl.add_argument("--frs", default=None)
    pl.add_argument("--step", type=float, default=None, help="step length (m)")
    pl.add_argument("--step-index", type=int, default=None)
    pl.add_argument("--khbar", type=int, required=True,
                    help="human subinterval index")
    pl.add_argument("--q0", default=None, help="JSON file with onset q")
    pl.add_argument("--phi", default="zero", choices=("zero", "quadratic"))
    pl.add_argument("--timeout-ms", type=float, default=75.0)
    pl.add_argument("--n-sub", type=int, default=N_SUBINTERVALS)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plan)

    exp = sub.add_parser("experiment", help="full sweep")
    ex_sub = exp.add_subparsers(dest="cmd", required=True)
    erun = ex_sub.add_parser("run")
    erun.add_argument("--gaits", required=True)
    erun.add_argument("--lib", required=True)
    erun.add_argument("--targets", required=True)
    erun.add_argument("--frs", required=True)
    erun.add_argument("--seed", type=int, default=0)
    erun.add_argument("--samples", type=int, default=3)
    erun.add_argument("--n-sub", type=int, default=N_SUBINTERVALS)
    erun.add_argument("--timeout-ms", type=float, default=75.0)
    erun.add_argument("--out", required=True)
    erun.add_argument("--render", default=None, help="also render to this dir")
    erun.add_argument("--verbose", action="store_true")
    erun.set_defaults(func=_cmd_experiment_run)

    rep = sub.add_parser("report", help="report rendering")
    rp_sub = rep.add_subparsers(dest="cmd", required=True)
    rrender = rp_sub.add_parser("render")
    rrender.add_argument("--report", required=True)
    rrender.add_argument("--out", required=True)
    rrender.add_argument("--targets", default=None)
    rrender.add_argument("--frs", default=None)
    rrender.set_defaults(func=_cmd_report_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
