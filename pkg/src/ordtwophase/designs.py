"""Phase-2 selection: SRS, ODS, covariate-stratified ODS and residual-dependent sampling.

SRS, ODS and CSODS use independent Bernoulli draws within strata, with
probability ``n_s / N_s`` (target over phase-1 count, clamped to 1). RDS
pre-allocates a few subjects per outcome level and then takes the extreme
probability-scale residuals of a working model that excludes the exposure.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .acml import InclusionProbabilityMap
from .errors import ConvergenceError, DataError
from .ordinal import Cohort
from .residuals import fit_working_model, psr_all

KINDS = ("SRS", "ODS", "CSODS", "RDS")


@dataclass
class Stratifier:
    """Maps a covariate column to groups ``1..t`` via right-closed intervals."""

    boundaries: np.ndarray
    column: int = 0

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, float)

    @property
    def n_groups(self):
        return self.boundaries.size + 1

    def assign(self, values):
        return np.searchsorted(self.boundaries, np.asarray(values, float), side="left") + 1


def quartile_stratifier(values, t=4, column=0):
    """Groups at the empirical ``i/t`` quantiles; ties go to the lower group."""
    values = np.asarray(values, float)
    if t < 2:
        raise ValueError("need t >= 2 groups")
    if np.ptp(values) == 0:
        raise DataError("cannot stratify a constant covariate")
    return Stratifier(np.quantile(values, np.arange(1, t) / t), column)


@dataclass
class SamplingPlan:
    kind: str
    srs_pi: float = None
    ods_targets: list = None
    csods_targets: list = None  # k x t
    groups: int = 4
    stratify_column: int = 0
    prealloc: int = 0
    tail_low: int = 0
    tail_high: int = 0
    working_covariates: list = None
    name: str = None

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.name is None:
            self.name = self.kind
        if self.kind == "SRS" and not (self.srs_pi is not None and 0 < self.srs_pi <= 1):
            raise ValueError("SRS needs srs_pi in (0, 1]")
        if self.kind == "ODS":
            if self.ods_targets is None or np.any(np.asarray(self.ods_targets) < 0):
                raise ValueError("ODS needs nonnegative ods_targets")
        if self.kind == "CSODS":
            tg = np.asarray(self.csods_targets)
            if tg.ndim != 2 or np.any(tg < 0):
                raise ValueError("CSODS needs a nonnegative k x t csods_targets matrix")
            self.groups = tg.shape[1]
        if self.kind == "RDS" and min(self.prealloc, self.tail_low, self.tail_high) < 0:
            raise ValueError("RDS sizes must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "covariates" in d:
            d["working_covariates"] = d.pop("covariates")
        return cls(**d)

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind}
        if self.kind == "SRS":
            out["srs_pi"] = self.srs_pi
        elif self.kind == "ODS":
            out["ods_targets"] = list(map(int, self.ods_targets))
        elif self.kind == "CSODS":
            out["csods_targets"] = np.asarray(self.csods_targets).astype(int).tolist()
            out["stratify_column"] = self.stratify_column
        else:
            out.update(prealloc=self.prealloc, tail_low=self.tail_low, tail_high=self.tail_high,
                       working_covariates=self.working_covariates)
        return out


@dataclass
class SelectionResult:
    selected: np.ndarray
    pi: np.ndarray
    stratum: np.ndarray
    kind: str
    pmap: InclusionProbabilityMap = None
    extra: dict = field(default_factory=dict)

    @property
    def n(self):
        return int(self.selected.sum())


def _clamped_probs(counts, targets, label):
    counts = np.asarray(counts, float)
    targets = np.asarray(targets, float)
    over = (targets > counts) & (counts > 0)
    if np.any(over):
        warnings.warn(f"{label}: targets exceed stratum counts in {int(over.sum())} cell(s); "
                      "sampling all of them", RuntimeWarning)
    empty = (targets > 0) & (counts == 0)
    if np.any(empty):
        warnings.warn(f"{label}: {int(empty.sum())} empty cell(s) with positive targets skipped",
                      RuntimeWarning)
    with np.errstate(divide="ignore", invalid="ignore"):
        pi = np.where(targets >= counts, 1.0, targets / counts)
    return pi


def _bernoulli(prob_per_subject, rng):
    u = rng.random(prob_per_subject.size)
    return u < prob_per_subject


def sample_srs(cohort, pi, rng):
    if not 0 < pi <= 1:
        raise ValueError(f"SRS probability must lie in (0, 1], got {pi}")
    n = len(cohort)
    probs = np.full(n, float(pi))
    sel = _bernoulli(probs, rng)
    return SelectionResult(sel, probs, np.ones(n, np.int64), "SRS",
                           InclusionProbabilityMap.constant(cohort.k, pi))


def _sample_cells(cohort, groups, n_groups, targets, rng, kind):
    k = cohort.k
    targets = np.asarray(targets, float).reshape(k, n_groups)
    counts = np.zeros((k, n_groups))
    np.add.at(counts, (cohort.y - 1, groups - 1), 1)
    table = _clamped_probs(counts, targets, kind)
    probs = table[cohort.y - 1, groups - 1]
    sel = _bernoulli(probs, rng)
    res = SelectionResult(sel, probs, groups.astype(np.int64), kind, InclusionProbabilityMap(table))
    res.extra["counts"] = counts
    res.extra["targets"] = targets
    return res


def sample_ods(cohort, targets, rng):
    targets = np.asarray(targets, float)
    if targets.size != cohort.k:
        raise DataError(f"need {cohort.k} ODS targets, got {targets.size}")
    groups = np.ones(len(cohort), np.int64)
    return _sample_cells(cohort, groups, 1, targets[:, None], rng, "ODS")


def sample_csods(cohort, stratifier, targets, rng):
    targets = np.asarray(targets, float)
    if targets.shape != (cohort.k, stratifier.n_groups):
        raise DataError(f"CSODS targets must be {cohort.k} x {stratifier.n_groups}")
    groups = stratifier.assign(cohort.z[:, stratifier.column])
    return _sample_cells(cohort, groups, stratifier.n_groups, targets, rng, "CSODS")


def select_extremes(y, scores, k, prealloc, tail_low, tail_high, rng):
    """Pre-allocate per outcome level, then take the lowest/highest scores of the rest.

    Ties at the cutoffs are broken uniformly at random.
    """
    y = np.asarray(y)
    scores = np.asarray(scores, float)
    n = y.size
    sel = np.zeros(n, bool)
    for j in range(1, k + 1):
        idx = np.flatnonzero(y == j)
        if idx.size < prealloc:
            warnings.warn(f"level {j} has only {idx.size} subjects for pre-allocation of {prealloc}",
                          RuntimeWarning)
        take = min(prealloc, idx.size)
        if take:
            sel[rng.choice(idx, take, replace=False)] = True
    rest = np.flatnonzero(~sel)
    if tail_low + tail_high > rest.size:
        warnings.warn("tails exceed the remaining subjects; selecting all of them", RuntimeWarning)
        sel[rest] = True
        return sel
    order = rest[rng.permutation(rest.size)]
    order = order[np.argsort(scores[order], kind="stable")]
    sel[order[:tail_low]] = True
    if tail_high:
        sel[order[order.size - tail_high:]] = True
    return sel


def sample_rds(cohort, plan, rng, newton=None):
    covs = plan.working_covariates
    if covs is None:
        covs = list(range(cohort.z.shape[1]))
    work = fit_working_model(cohort, covs, newton)
    if not work.converged:
        raise ConvergenceError(f"RDS working model did not converge: {work.message}")
    r = psr_all(work, cohort, covs)
    sel = select_extremes(cohort.y, r, cohort.k, plan.prealloc, plan.tail_low, plan.tail_high, rng)
    res = SelectionResult(sel, np.full(len(cohort), np.nan), np.full(len(cohort), -1, np.int64), "RDS")
    res.extra["psr"] = r
    res.extra["working_fit"] = work
    return res


def draw_sample(plan, cohort, rng):
    if plan.kind == "SRS":
        return sample_srs(cohort, plan.srs_pi, rng)
    if plan.kind == "ODS":
        return sample_ods(cohort, plan.ods_targets, rng)
    if plan.kind == "CSODS":
        col = plan.stratify_column
        strat = quartile_stratifier(cohort.z[:, col], plan.groups, col)
        res = sample_csods(cohort, strat, plan.csods_targets, rng)
        res.extra["stratifier"] = strat
        return res
    return sample_rds(cohort, plan, rng)


def apply_selection(cohort, selection):
    """Phase-2 view of a full cohort: exposure kept only where selected."""
    sel = np.asarray(selection.selected, bool)
    x = np.where(sel, cohort.x, np.nan)
    if np.any(sel & np.isnan(cohort.x)):
        raise DataError("selected subjects must have the exposure available")
    return Cohort(y=cohort.y, z=cohort.z, x=x, s=sel, pi=selection.pi,
                  stratum=selection.stratum, k=cohort.k, ids=cohort.ids)
