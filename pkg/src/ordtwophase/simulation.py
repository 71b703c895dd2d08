"""Simulation study: cohort generation, design/estimator cells and summary metrics.

A study config (JSON) lists scenarios; each scenario carries its own sampling
plans and the (design, estimator) cells to run. Per-replicate results are
appended to ``replicates.csv`` so interrupted or partial runs can be resumed
and extended with more cells or replicates.
"""

import csv
import hashlib
import json
import math
import os
import warnings
import zlib
from dataclasses import dataclass, field, fields
from importlib import resources
from multiprocessing import get_context

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .acml import fit_acml, require_pmap
from .designs import SamplingPlan, apply_selection, draw_sample
from .errors import DataError, OrdinalError, UnsupportedDesignError
from .imputation import ImputationConfig, run_mi
from .ordinal import Cohort, NewtonConfig, fit_ml, param_names
from .smle import SieveConfig, fit_smle

ESTIMATORS = ("ML", "ACML", "MI", "SMLE")
REPLICATE_FIELDS = ["scenario", "rep", "design", "estimator", "status", "param", "est", "see", "n2", "message"]
METRIC_FIELDS = ["scenario", "design", "estimator", "param", "est", "se", "see", "cp", "re"]


class StudyAbortedError(OrdinalError):
    """Too many replicate failures in at least one cell."""


@dataclass
class ScenarioConfig:
    name: str
    N: int
    beta: list
    corr_xz1: float
    prevalences: list
    k: int = None
    n_z: int = 2
    designs: list = field(default_factory=list)
    cells: list = None
    alphas: list = None

    def __post_init__(self):
        self.prevalences = [float(v) for v in self.prevalences]
        if self.k is None:
            self.k = len(self.prevalences)
        if len(self.prevalences) != self.k or abs(sum(self.prevalences) - 1.0) > 1e-9:
            raise ValueError("prevalences must be a probability vector of length k")
        if min(self.prevalences) <= 0:
            raise ValueError("prevalences must be positive")
        if len(self.beta) != 1 + self.n_z:
            raise ValueError("beta needs one slope for x and one per z covariate")
        if self.N < 1:
            raise ValueError("N must be positive")
        self.designs = [d if isinstance(d, SamplingPlan) else SamplingPlan.from_dict(d) for d in self.designs]
        names = [d.name for d in self.designs]
        if len(set(names)) != len(names):
            raise ValueError("design names must be unique")
        if self.cells is None:
            self.cells = [(d, e) for d in names for e in ESTIMATORS]
        self.cells = [tuple(c) for c in self.cells]
        for d, e in self.cells:
            if d not in names or e not in ESTIMATORS:
                raise ValueError(f"unknown cell {d}+{e}")

    def plan(self, name):
        for d in self.designs:
            if d.name == name:
                return d
        raise KeyError(name)

    def truth(self):
        return np.concatenate((self.alphas, self.beta))

    def names(self):
        return param_names(self.k, len(self.beta))

    def to_dict(self):
        return {"name": self.name, "N": self.N, "k": self.k, "beta": list(self.beta),
                "corr_xz1": self.corr_xz1, "n_z": self.n_z, "prevalences": self.prevalences,
                "designs": [d.to_dict() for d in self.designs],
                "cells": [list(c) for c in self.cells],
                "alphas": None if self.alphas is None else [float(a) for a in self.alphas]}


@dataclass
class StudyConfig:
    scenarios: list
    replicates: int = 500
    seed: int = 0
    calibration_draws: int = 1_000_000
    calibration_seed: int = 1
    reference: tuple = ("SRS", "ML")
    mi: ImputationConfig = field(default_factory=ImputationConfig)
    smle: SieveConfig = field(default_factory=SieveConfig)
    max_failure_rate: float = 0.05

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        self.reference = tuple(self.reference)

    @classmethod
    def from_dict(cls, d):
        est = d.get("estimators", {})
        return cls(
            scenarios=[ScenarioConfig(**s) for s in d["scenarios"]],
            replicates=int(d.get("replicates", 500)),
            seed=int(d.get("seed", 0)),
            calibration_draws=int(d.get("calibration_draws", 1_000_000)),
            calibration_seed=int(d.get("calibration_seed", 1)),
            reference=tuple(d.get("reference", ("SRS", "ML"))),
            mi=ImputationConfig(**est.get("MI", {})),
            smle=SieveConfig(**est.get("SMLE", {})),
            max_failure_rate=float(d.get("max_failure_rate", 0.05)),
        )

    def to_dict(self):
        return {
            "seed": self.seed, "replicates": self.replicates,
            "calibration_draws": self.calibration_draws, "calibration_seed": self.calibration_seed,
            "reference": list(self.reference), "max_failure_rate": self.max_failure_rate,
            "estimators": {"MI": _settings(self.mi), "SMLE": _settings(self.smle)},
            "scenarios": [s.to_dict() for s in self.scenarios],
        }

    def scenario(self, name):
        for s in self.scenarios:
            if s.name == name:
                return s
        raise KeyError(name)


def _settings(cfg):
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in ("newton", "keep_completed"):
            continue
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config_dict():
    return json.loads(resources.files("ordtwophase").joinpath("data/study.json").read_text())


def load_config(path=None):
    if path is None:
        return StudyConfig.from_dict(default_config_dict())
    with open(path) as fh:
        return StudyConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# data generation


def covariate_correlation(corr_xz1, n_z):
    C = np.eye(1 + n_z)
    if n_z >= 1:
        C[0, 1] = C[1, 0] = corr_xz1
    return C


def draw_covariates(N, corr_xz1, n_z, rng):
    """``(x, z)`` from a mean-zero unit-variance normal; only x and z1 correlate."""
    C = covariate_correlation(corr_xz1, n_z)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise DataError(f"correlation {corr_xz1} gives a non-positive-definite covariance") from None
    W = rng.standard_normal((N, 1 + n_z)) @ L.T
    return W[:, 0], W[:, 1:]


def calibrate_intercepts(beta, corr_xz1, targets, rng, n_z=None, draws=1_000_000):
    """Cutpoints matching the marginal outcome distribution ``targets``.

    Solves ``mean(expit(alpha_j + eta)) = cumulative target j`` over a fixed
    Monte Carlo draw of the covariates.
    """
    targets = np.asarray(targets, float)
    if np.any(targets <= 0) or abs(targets.sum() - 1.0) > 1e-9:
        raise ValueError("targets must be a positive probability vector")
    beta = np.asarray(beta, float)
    n_z = beta.size - 1 if n_z is None else n_z
    x, z = draw_covariates(draws, corr_xz1, n_z, rng)
    eta = beta[0] * x + z @ beta[1:]
    cum = np.cumsum(targets)[:-1]
    span = 50.0 + float(np.abs(eta).max())
    alphas = []
    for c in cum:
        f = lambda a, c=c: expit(a + eta).mean() - c  # noqa: E731
        lo, hi = -span, span
        if f(lo) > 0 or f(hi) < 0:
            raise ValueError(f"cannot bracket the cutpoint for cumulative target {c}")
        alphas.append(brentq(f, lo, hi, xtol=1e-12, rtol=1e-14))
    alphas = np.array(alphas)
    if np.any(np.diff(alphas) <= 0):
        raise ValueError("calibrated cutpoints are not increasing")
    return alphas


def generate_cohort(scenario, rng):
    x, z = draw_covariates(scenario.N, scenario.corr_xz1, scenario.n_z, rng)
    beta = np.asarray(scenario.beta, float)
    eta = beta[0] * x + z @ beta[1:]
    F = expit(np.asarray(scenario.alphas)[None, :] + eta[:, None])
    u = rng.random(scenario.N)
    y = 1 + (u[:, None] > F).sum(1)
    return Cohort(y=y, z=z, x=x, k=scenario.k)


def ensure_calibrated(config):
    for i, scn in enumerate(config.scenarios):
        if scn.alphas is None:
            rng = np.random.default_rng([config.calibration_seed, i])
            scn.alphas = calibrate_intercepts(scn.beta, scn.corr_xz1, scn.prevalences, rng,
                                              scn.n_z, config.calibration_draws).tolist()
    return config


# ---------------------------------------------------------------------------
# estimators


def admissible(kind, estimator):
    return not (kind == "RDS" and estimator in ("ACML", "MI"))


def fit_estimator(estimator, phase2, selection, config, rng):
    """Run one estimator on a phase-2 cohort; returns a FitResult."""
    if estimator == "ML":
        return fit_ml(phase2.complete())
    if estimator == "ACML":
        return fit_acml(phase2, require_pmap(selection))
    if estimator == "MI":
        return run_mi(phase2, require_pmap(selection), config.mi, rng, selection.kind)
    if estimator == "SMLE":
        return fit_smle(phase2, config.smle)[0]
    raise ValueError(f"unknown estimator {estimator!r}")


def _key(name):
    return zlib.crc32(name.encode())


def stream(seed, scenario, rep, *labels):
    """Generator keyed by (scenario, replicate, labels); independent of run order."""
    key = (_key(scenario), rep) + tuple(_key(lab) for lab in labels)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def run_replicate(config, scenario, rep, cells):
    """Rows for the requested cells of one replicate."""
    cohort = generate_cohort(scenario, stream(config.seed, scenario.name, rep, "cohort"))
    names = scenario.names()
    rows = []
    by_design = {}
    for d, e in cells:
        by_design.setdefault(d, []).append(e)
    for dname, ests in by_design.items():
        plan = scenario.plan(dname)
        base = dict(scenario=scenario.name, rep=rep, design=dname)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sel = draw_sample(plan, cohort, stream(config.seed, scenario.name, rep, "design", dname))
            phase2 = apply_selection(cohort, sel)
        except (OrdinalError, ValueError, np.linalg.LinAlgError) as exc:
            for e in ests:
                rows.append(dict(base, estimator=e, status="failed", param="", est="", see="",
                                 n2="", message=f"design: {exc}"))
            continue
        for e in ests:
            row = dict(base, estimator=e, n2=sel.n)
            rng = stream(config.seed, scenario.name, rep, "estimator", dname, e)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fit = fit_estimator(e, phase2, sel, config, rng)
                if not fit.converged:
                    raise OrdinalError(fit.message or "did not converge")
                se = fit.se
                if not np.all(np.isfinite(se)):
                    raise OrdinalError("non-finite standard errors")
            except UnsupportedDesignError as exc:
                rows.append(dict(row, status="refused", param="", est="", see="", message=str(exc)))
                continue
            except (OrdinalError, ValueError, np.linalg.LinAlgError) as exc:
                rows.append(dict(row, status="failed", param="", est="", see="", message=str(exc)))
                continue
            for nm, v, s in zip(names, fit.params, se):
                rows.append(dict(row, status="ok", param=nm, est=repr(float(v)), see=repr(float(s)),
                                 message=""))
    return rows


def _job(args):
    config, scn_name, rep, cells = args
    return run_replicate(config, config.scenario(scn_name), rep, cells)


# ---------------------------------------------------------------------------
# study driver


def fingerprint(config):
    """Hash of everything that determines replicate values (not R, not the cell list)."""
    d = config.to_dict()
    d.pop("replicates")
    d.pop("max_failure_rate")
    d.pop("reference")
    for s in d["scenarios"]:
        s.pop("cells")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def read_replicates(path):
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _done_keys(rows):
    return {(r["scenario"], int(r["rep"]), r["design"], r["estimator"]) for r in rows}


def run_study(config, out_dir, threads=1, scenarios=None, cells=None, progress=None):
    """Run (or resume) a study and write ``metrics.csv`` and ``re.csv``.

    ``scenarios`` and ``cells`` optionally restrict the work to a subset;
    rows already present in ``out_dir/replicates.csv`` are reused.
    """
    ensure_calibrated(config)
    os.makedirs(out_dir, exist_ok=True)
    meta_path = os.path.join(out_dir, "study.json")
    fp = fingerprint(config)
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("fingerprint") != fp:
            raise DataError(f"{out_dir} holds results for a different configuration")
    with open(meta_path, "w") as fh:
        json.dump({"fingerprint": fp, "config": config.to_dict()}, fh, indent=1)

    rep_path = os.path.join(out_dir, "replicates.csv")
    existing = read_replicates(rep_path)
    done = _done_keys(existing)
    jobs = []
    for scn in config.scenarios:
        if scenarios is not None and scn.name not in scenarios:
            continue
        todo_cells = [c for c in scn.cells if cells is None or tuple(c) in set(map(tuple, cells))]
        for rep in range(config.replicates):
            need = [c for c in todo_cells if (scn.name, rep, c[0], c[1]) not in done]
            # refused cells are recorded without running anything
            need_run = [c for c in need if admissible(scn.plan(c[0]).kind, c[1])]
            refused = [c for c in need if c not in need_run]
            if refused:
                with open(rep_path, "a", newline="") as fh:
                    w = csv.DictWriter(fh, REPLICATE_FIELDS)
                    if fh.tell() == 0:
                        w.writeheader()
                    for d, e in refused:
                        w.writerow(dict(scenario=scn.name, rep=rep, design=d, estimator=e,
                                        status="refused", param="", est="", see="", n2="",
                                        message=f"{e} needs closed-form inclusion probabilities"))
            if need_run:
                jobs.append((config, scn.name, rep, need_run))

    def write(rows):
        with open(rep_path, "a", newline="") as fh:
            w = csv.DictWriter(fh, REPLICATE_FIELDS)
            if fh.tell() == 0:
                w.writeheader()
            w.writerows(rows)

    if threads > 1 and len(jobs) > 1:
        with get_context("fork").Pool(threads) as pool:
            for i, rows in enumerate(pool.imap_unordered(_job, jobs)):
                write(rows)
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            write(_job(job))
            if progress:
                progress(i + 1, len(jobs))

    table = aggregate(config, read_replicates(rep_path), scenarios=scenarios, cells=cells)
    table.write(out_dir)
    table.check_failures(config.max_failure_rate)
    return table


# ---------------------------------------------------------------------------
# metrics


def variance_ratio(reference_var, cell_var):
    reference_var = np.asarray(reference_var, float)
    cell_var = np.asarray(cell_var, float)
    if np.any(cell_var <= 0) or np.any(reference_var <= 0):
        raise ValueError("relative efficiency needs positive variances")
    return reference_var / cell_var


@dataclass
class CellSummary:
    scenario: str
    design: str
    estimator: str
    params: list
    estimates: np.ndarray  # R_ok x p
    sees: np.ndarray
    truth: np.ndarray
    n_failed: int = 0
    n_refused: int = 0

    @property
    def n_ok(self):
        return self.estimates.shape[0]

    @property
    def failure_rate(self):
        total = self.n_ok + self.n_failed
        return self.n_failed / total if total else 0.0

    def mean(self):
        return self.estimates.mean(0)

    def empirical_se(self):
        return self.estimates.std(0, ddof=1) if self.n_ok > 1 else np.full(len(self.params), np.nan)

    def mean_see(self):
        return self.sees.mean(0)

    def coverage(self, z=1.96):
        hit = np.abs(self.estimates - self.truth) <= z * self.sees
        return hit.mean(0)


@dataclass
class MetricsTable:
    cells: dict  # (scenario, design, estimator) -> CellSummary
    reference: tuple = ("SRS", "ML")

    def cell(self, scenario, design, estimator):
        return self.cells[(scenario, design, estimator)]

    def relative_efficiency(self, scenario, design, estimator, reference=None):
        ref = self.cells[(scenario,) + tuple(reference or self.reference)]
        cell = self.cells[(scenario, design, estimator)]
        return variance_ratio(ref.empirical_se() ** 2, cell.empirical_se() ** 2)

    def rows(self):
        out = []
        for (scn, d, e), c in self.cells.items():
            if c.n_ok == 0:
                continue
            try:
                re = self.relative_efficiency(scn, d, e)
            except (KeyError, ValueError):
                re = np.full(len(c.params), np.nan)
            m, se, see, cp = c.mean(), c.empirical_se(), c.mean_see(), c.coverage()
            for i, p in enumerate(c.params):
                out.append(dict(scenario=scn, design=d, estimator=e, param=p, est=m[i], se=se[i],
                                see=see[i], cp=cp[i], re=re[i]))
        return out

    def write(self, out_dir):
        rows = self.rows()
        fmt = lambda v: v if isinstance(v, str) else f"{v:.10g}"  # noqa: E731
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, METRIC_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: fmt(v) for k, v in r.items()})
        with open(os.path.join(out_dir, "re.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "design", "estimator", "param", "re", "n_ok", "n_failed"])
            for r in rows:
                c = self.cells[(r["scenario"], r["design"], r["estimator"])]
                w.writerow([r["scenario"], r["design"], r["estimator"], r["param"], fmt(r["re"]),
                            c.n_ok, c.n_failed])
        refused = [c for c in self.cells.values() if c.n_refused]
        with open(os.path.join(out_dir, "refusals.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "design", "estimator"])
            for c in refused:
                w.writerow([c.scenario, c.design, c.estimator])

    def check_failures(self, limit):
        bad = [(k, c.failure_rate) for k, c in self.cells.items() if c.failure_rate > limit]
        if bad:
            desc = ", ".join(f"{'+'.join(k)}: {r:.1%}" for k, r in bad)
            raise StudyAbortedError(f"replicate failure rate above {limit:.0%} in {desc}")


def relative_efficiency(table, cell, reference=None):
    """Per-parameter ratio var(reference) / var(cell); ``cell`` is (scenario, design, estimator)."""
    return table.relative_efficiency(*cell, reference=reference)


def aggregate(config, rows, scenarios=None, cells=None):
    ensure_calibrated(config)
    cell_filter = None if cells is None else set(map(tuple, cells))
    grouped = {}
    for r in rows:
        key = (r["scenario"], r["design"], r["estimator"])
        if scenarios is not None and key[0] not in scenarios:
            continue
        if cell_filter is not None and key[1:] not in cell_filter:
            continue
        if int(r["rep"]) >= config.replicates:
            continue
        g = grouped.setdefault(key, {"ok": {}, "failed": set(), "refused": set()})
        rep = int(r["rep"])
        if r["status"] == "ok":
            g["ok"].setdefault(rep, {})[r["param"]] = (float(r["est"]), float(r["see"]))
        else:
            g[r["status"]].add(rep)
    out = {}
    for key, g in grouped.items():
        scn = config.scenario(key[0])
        names = scn.names()
        reps = sorted(g["ok"])
        est = np.array([[g["ok"][r][p][0] for p in names] for r in reps]).reshape(len(reps), len(names))
        see = np.array([[g["ok"][r][p][1] for p in names] for r in reps]).reshape(len(reps), len(names))
        out[key] = CellSummary(key[0], key[1], key[2], names, est, see, scn.truth(),
                               len(g["failed"]), len(g["refused"]))
    return MetricsTable(dict(sorted(out.items())), tuple(config.reference))


def d_efficiency(cov, p=None):
    """``det(cov^-1) ** (1/p)`` for a positive-definite covariance block."""
    cov = np.atleast_2d(np.asarray(cov, float))
    p = cov.shape[0] if p is None else p
    if cov.shape != (p, p):
        raise ValueError(f"expected a {p} x {p} covariance")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance is singular or not positive definite") from None
    logdet = 2.0 * np.log(np.diag(L)).sum()
    if not np.isfinite(logdet):
        raise np.linalg.LinAlgError("covariance is singular")
    return math.exp(-logdet / p)
