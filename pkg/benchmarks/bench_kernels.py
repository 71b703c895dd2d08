"""Compare the compiled kernels against the numpy fallback on study-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from ordtwophase import _pykernels as py
from ordtwophase.smle import banded_basis, spline_knots

try:
    from ordtwophase import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def make_inputs(seed=0, n=1500, n2=400, df=20):
    rng = np.random.default_rng(seed)
    alpha = np.array([1.2, 1.8, 2.3])
    beta = np.array([0.5, -1.5, -0.1])
    X = rng.standard_normal((n, 3))
    y = rng.integers(0, 4, n)
    xs = np.sort(rng.standard_normal(n2))
    Zu = np.ascontiguousarray(X[n2:, 1:])
    yu = np.ascontiguousarray(y[n2:])
    knots = spline_knots(X[:, 1], df, 1)
    first, vals = banded_basis(X[n2:, 1], knots, 1)
    pmat = rng.random((n2, df))
    pmat /= pmat.sum(0)
    P = py.grid_probs(alpha, beta, yu, xs, Zu)
    Q = P / P.sum(1, keepdims=True)
    return dict(alpha=alpha, beta=beta, X=X, y=y, xs=xs, Zu=Zu, yu=yu, first=np.ascontiguousarray(first),
                vals=np.ascontiguousarray(vals), pmat=pmat, P=P, Q=Q)


def cases(mod, d):
    return {
        "po_derivs (N=1500, order 2)": lambda: mod.po_derivs(d["alpha"], d["beta"], d["y"], d["X"], None, 2),
        "grid_probs (1100 x 400)": lambda: mod.grid_probs(d["alpha"], d["beta"], d["yu"], d["xs"], d["Zu"]),
        "grid_po_derivs (1100 x 400)": lambda: mod.grid_po_derivs(
            d["alpha"], d["beta"], d["yu"], d["xs"], d["Zu"], d["Q"], 2),
        "sieve_estep (1100 x 400, df 20)": lambda: mod.sieve_estep(d["P"], d["first"], d["vals"], d["pmat"], True),
    }


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    d = make_inputs()
    ref = cases(py, d)
    comp = cases(cy, d) if cy is not None else {}
    print(f"{'kernel':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in ref.items():
        t_py = best_time(fn, args.repeat) * 1e3
        if name in comp:
            t_cy = best_time(comp[name], args.repeat) * 1e3
            print(f"{name:34s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:8.1f}")
        else:
            print(f"{name:34s} {t_py:10.3f} {'n/a':>10s}")


if __name__ == "__main__":
    main()
