"""Command-line entry point: ``ordtwophase <command> [options]``."""

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import io
from .acml import pmap_from_records
from .designs import apply_selection, draw_sample
from .errors import OrdinalError
from .simulation import (
    ESTIMATORS,
    StudyConfig,
    aggregate,
    ensure_calibrated,
    fit_estimator,
    generate_cohort,
    load_config,
    read_replicates,
    run_study,
)
from .smle import fit_smle


def _scenario(cfg, name):
    if name is None:
        return cfg.scenarios[0]
    try:
        return cfg.scenario(name)
    except KeyError:
        raise SystemExit(f"unknown scenario {name!r}; have {[s.name for s in cfg.scenarios]}") from None


def _rng(seed):
    return np.random.default_rng(seed)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_calibrate(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.calibration_seed = args.seed
    ensure_calibrated(cfg)
    result = {s.name: list(map(float, s.alphas)) for s in cfg.scenarios}
    text = json.dumps(result, indent=1)
    if args.out:
        with open(_out(args, "alphas.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_generate(args):
    cfg = ensure_calibrated(load_config(args.config))
    scn = _scenario(cfg, args.scenario)
    cohort = generate_cohort(scn, _rng(args.seed))
    path = _out(args, "cohort.csv")
    io.write_cohort(path, cohort)
    print(f"wrote {len(cohort)} subjects to {path}")


def cmd_sample(args):
    cfg = ensure_calibrated(load_config(args.config))
    scn = _scenario(cfg, args.scenario)
    rng = _rng(args.seed)
    cohort = io.read_cohort(args.cohort, scn.k) if args.cohort else generate_cohort(scn, rng)
    plan = scn.plan(args.design)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        sel = draw_sample(plan, cohort, rng)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    io.write_selection(_out(args, "selection.csv"), cohort.ids, sel)
    io.write_cohort(_out(args, "phase2.csv"), apply_selection(cohort, sel))
    if "psr" in sel.extra:
        io.write_psr(_out(args, "psr.csv"), cohort.ids, sel.extra["psr"])
    print(f"{plan.name}: selected {sel.n} of {len(cohort)}")


class _Records:
    """Selection stand-in rebuilt from a phase-2 cohort file."""

    def __init__(self, cohort, kind):
        self.kind = kind
        self.pmap = None
        if kind != "RDS":
            try:
                self.pmap = pmap_from_records(cohort.y, cohort.stratum, cohort.pi, cohort.k)
            except OrdinalError:
                self.pmap = None


def cmd_fit(args):
    cfg = load_config(args.config)
    cohort = io.read_cohort(args.cohort, args.k)
    est = args.estimator.upper()
    kind = args.design_kind.upper() if args.design_kind else None
    if kind is None:
        kind = "RDS" if np.all(np.isnan(cohort.pi)) else "ODS"
    sel = _Records(cohort, kind)
    try:
        if est == "SMLE":
            fit, state = fit_smle(cohort, cfg.smle)
            io.write_trace(_out(args, "em_trace.csv"), state.trace)
            io.write_sieve_state(_out(args, "sieve_state.json"), state)
        else:
            fit = fit_estimator(est, cohort, sel, cfg, _rng(args.seed))
    except OrdinalError as exc:
        raise SystemExit(f"{est} failed: {exc}") from None
    io.write_fit(_out(args, "fit.csv"), fit)
    for name, v, s in zip(fit.names, fit.params, fit.se):
        print(f"{name:>8s} {v: .5f} ({s:.5f})")
    if not fit.converged:
        print(f"warning: {fit.message}", file=sys.stderr)


def _cells(spec):
    if not spec:
        return None
    return [tuple(c.split("+")) for c in spec.split(",")]


def cmd_simulate(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        cfg.replicates = args.replicates

    def progress(i, n):
        if i == n or i % max(1, n // 20) == 0:
            print(f"{i}/{n} replicate jobs done", file=sys.stderr)

    try:
        table = run_study(cfg, args.out, threads=args.threads, scenarios=args.scenario,
                          cells=_cells(args.cells), progress=progress)
    except OrdinalError as exc:
        raise SystemExit(str(exc)) from None
    print(f"wrote metrics for {len(table.cells)} cells to {args.out}")


def cmd_metrics(args):
    meta_path = os.path.join(args.out, "study.json")
    if args.config:
        cfg = load_config(args.config)
    elif os.path.exists(meta_path):
        with open(meta_path) as fh:
            cfg = StudyConfig.from_dict(json.load(fh)["config"])
    else:
        raise SystemExit(f"no study.json in {args.out}; pass --config")
    if args.replicates is not None:
        cfg.replicates = args.replicates
    table = aggregate(cfg, read_replicates(os.path.join(args.out, "replicates.csv")))
    table.write(args.out)
    print(f"wrote metrics for {len(table.cells)} cells to {args.out}")


def build_parser():
    ap = argparse.ArgumentParser(prog="ordtwophase", description="Two-phase designs for ordinal outcomes.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="study config JSON (default: bundled three-scenario study)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--replicates", type=int, default=None)
        return p

    p = common(sub.add_parser("calibrate", help="solve cutpoints for the target prevalences"), False)
    p.set_defaults(func=cmd_calibrate)

    p = common(sub.add_parser("generate", help="simulate a phase-1 cohort"))
    p.add_argument("--scenario")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("sample", help="draw a phase-2 sample"))
    p.add_argument("--scenario")
    p.add_argument("--design", required=True)
    p.add_argument("--cohort", help="cohort CSV (default: generate one from --seed)")
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("fit", help="fit one estimator to a phase-2 cohort CSV"))
    p.add_argument("--cohort", required=True)
    p.add_argument("--estimator", required=True, choices=ESTIMATORS + tuple(e.lower() for e in ESTIMATORS))
    p.add_argument("--design-kind", help="SRS, ODS, CSODS or RDS (default: inferred from pi)")
    p.add_argument("--k", type=int, default=None, help="number of outcome levels")
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("simulate", help="run or resume a simulation study"))
    p.add_argument("--scenario", action="append", help="restrict to a scenario (repeatable)")
    p.add_argument("--cells", help="comma-separated DESIGN+ESTIMATOR list, e.g. SRS+ML,ODS+ACML")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("metrics", help="recompute metrics.csv and re.csv from replicates.csv"))
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command in ("generate", "sample", "fit"):
        args.seed = 0
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
