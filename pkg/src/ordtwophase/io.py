"""CSV readers and writers for cohorts, selections, fits and EM traces."""

import csv
import json

import numpy as np

from .errors import DataError
from .ordinal import Cohort


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def _float(s):
    return np.nan if s == "" else float(s)


def write_cohort(path, cohort):
    nz = cohort.z.shape[1]
    head = ["id", "y", "x"] + [f"z{j + 1}" for j in range(nz)] + ["s", "pi", "stratum"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i in range(len(cohort)):
            w.writerow([cohort.ids[i], int(cohort.y[i]), _fmt(cohort.x[i])]
                       + [_fmt(v) for v in cohort.z[i]]
                       + [_fmt(bool(cohort.s[i])), _fmt(cohort.pi[i]), int(cohort.stratum[i])])


def read_cohort(path, k=None):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path} has no rows")
    zcols = sorted((c for c in rows[0] if c.startswith("z") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if "y" not in rows[0] or not zcols:
        raise DataError("cohort CSV needs y and z1.. columns")
    get = lambda c, default: [r.get(c, default) for r in rows]  # noqa: E731
    x = np.array([_float(v) for v in get("x", "")])
    s = np.array([v == "1" for v in get("s", "")]) if "s" in rows[0] else None
    return Cohort(
        y=np.array([int(v) for v in get("y", "")]),
        z=np.array([[float(r[c]) for c in zcols] for r in rows]),
        x=x,
        s=s,
        pi=np.array([_float(v) for v in get("pi", "")]),
        stratum=np.array([int(v) if v != "" else -1 for v in get("stratum", "-1")]),
        k=k,
        ids=np.array([int(v) for v in get("id", "")]) if "id" in rows[0] else None,
    )


def write_selection(path, ids, selection):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "selected", "pi", "stratum"])
        for i, sid in enumerate(ids):
            w.writerow([sid, _fmt(bool(selection.selected[i])), _fmt(selection.pi[i]),
                        int(selection.stratum[i])])


def read_selection(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "id": np.array([int(r["id"]) for r in rows]),
        "selected": np.array([r["selected"] == "1" for r in rows]),
        "pi": np.array([_float(r["pi"]) for r in rows]),
        "stratum": np.array([int(r["stratum"]) for r in rows]),
    }


def write_psr(path, ids, residuals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psr"])
        for sid, r in zip(ids, residuals):
            w.writerow([sid, _fmt(r)])


def write_fit(path, fit):
    fmi = fit.extra.get("fmi")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "estimate", "se", "fmi"])
        for i, name in enumerate(fit.names):
            w.writerow([name, _fmt(fit.params[i]), _fmt(fit.se[i]),
                        "" if fmi is None else _fmt(fmi[i])])


def read_fit(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {r["param"]: (float(r["estimate"]), _float(r["se"]), _float(r["fmi"])) for r in rows}


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loglik", "max_param_change"])
        for it, ll, change in trace:
            w.writerow([it, _fmt(ll), _fmt(change)])


def write_sieve_state(path, state):
    """JSON dump of the sieve masses for audit."""
    with open(path, "w") as fh:
        json.dump({
            "support": state.support.tolist(),
            "knots": None if state.knots is None else state.knots.tolist(),
            "p": state.p.tolist(),
        }, fh)
