"""Pure-numpy implementations of the hot kernels.

These are the reference versions. ``ordtwophase._ckernels`` (Cython) mirrors
every function here with the same signature and is preferred at import time
when it has been compiled; see :mod:`ordtwophase.kernels`.

Conventions shared by all kernels:

* ``y`` holds 0-based outcome levels ``0 .. k-1`` as an integer array.
* ``alpha`` holds the ``k - 1`` cutpoints, ``beta`` the slopes.
* The parameter vector is ordered ``(alpha, beta)``; gradients and Hessians
  follow that order.
* ``order`` selects the output: 0 log-likelihood only, 1 adds the gradient,
  2 adds the Hessian. Unrequested outputs are returned as ``None``.
"""

import numpy as np
from scipy.special import expit

from .errors import DegenerateSupportError


def cell_terms(alpha, y, eta, order=2):
    """Per-observation log-probability and derivative pieces.

    ``eta`` may have any shape that broadcasts against ``y``. Returns a dict
    with ``logp`` and, depending on ``order``, the first derivatives with
    respect to the upper/lower cut arguments (``gu``, ``gl``) and the second
    derivatives (``huu``, ``hll``, ``hul``).
    """
    alpha_ext = np.concatenate(([-np.inf], np.asarray(alpha, float), [np.inf]))
    u = alpha_ext[y + 1] + eta
    lo = alpha_ext[y] + eta
    fu, su = expit(u), expit(-u)
    fl, sl = expit(lo), expit(-lo)
    with np.errstate(invalid="ignore"):
        p = np.where(lo > 0, sl - su, fu - fl)
    with np.errstate(divide="ignore"):
        out = {"logp": np.log(p)}
    if order < 1:
        return out
    du = fu * su
    dl = fl * sl
    with np.errstate(divide="ignore", invalid="ignore"):
        gu = du / p
        gl = -dl / p
    out["gu"] = gu
    out["gl"] = gl
    if order < 2:
        return out
    with np.errstate(divide="ignore", invalid="ignore"):
        out["huu"] = du * (su - fu) / p - gu * gu
        out["hll"] = -dl * (sl - fl) / p - gl * gl
    out["hul"] = -gu * gl
    return out


def po_derivs(alpha, beta, y, X, w=None, order=2):
    """Weighted proportional-odds log-likelihood with gradient and Hessian."""
    alpha = np.asarray(alpha, float)
    beta = np.asarray(beta, float)
    X = np.asarray(X, float)
    y = np.asarray(y, np.intp)
    km1 = alpha.size
    p = beta.size
    w = np.ones(y.size) if w is None else np.asarray(w, float)
    eta = X @ beta if p else np.zeros(y.size)
    t = cell_terms(alpha, y, eta, order)
    with np.errstate(invalid="ignore"):
        ll = float(np.where(w != 0, w * t["logp"], 0.0).sum())
    if order < 1:
        return ll, None, None
    if not np.isfinite(ll):
        return ll, None, None
    up = y < km1
    lw = y > 0
    wgu = w * t["gu"]
    wgl = w * t["gl"]
    ga = np.bincount(y[up], wgu[up], minlength=km1)[:km1]
    ga += np.bincount(y[lw] - 1, wgl[lw], minlength=km1)[:km1]
    geta = wgu + wgl
    grad = np.concatenate((ga, X.T @ geta))
    if order < 2:
        return ll, grad, None
    huu, hll, hul = w * t["huu"], w * t["hll"], w * t["hul"]
    dim = km1 + p
    H = np.zeros((dim, dim))
    diag = np.bincount(y[up], huu[up], minlength=km1)[:km1]
    diag += np.bincount(y[lw] - 1, hll[lw], minlength=km1)[:km1]
    H[np.arange(km1), np.arange(km1)] = diag
    mid = up & lw
    off = np.bincount(y[mid] - 1, hul[mid], minlength=km1)[: km1 - 1] if km1 > 1 else []
    for j in range(km1 - 1):
        H[j, j + 1] = H[j + 1, j] = off[j]
    # cutpoint x slope block
    hu_eta = huu + hul
    hl_eta = hul + hll
    for j in range(km1):
        sel_u = y == j
        sel_l = y == j + 1
        row = X[sel_u].T @ hu_eta[sel_u] + X[sel_l].T @ hl_eta[sel_l]
        H[j, km1:] = row
        H[km1:, j] = row
    heta = huu + 2.0 * hul + hll
    H[km1:, km1:] = (X * heta[:, None]).T @ X
    return ll, grad, H


def grid_probs(alpha, beta, y, xs, Z):
    """Matrix of P(y_i | x = xs[v], z_i) for every row ``i`` and grid point ``v``."""
    beta = np.asarray(beta, float)
    zb = np.asarray(Z, float) @ beta[1:] if beta.size > 1 else np.zeros(len(y))
    eta = zb[:, None] + beta[0] * np.asarray(xs, float)[None, :]
    t = cell_terms(alpha, np.asarray(y, np.intp)[:, None], eta, order=0)
    return np.exp(t["logp"])


def grid_po_derivs(alpha, beta, y, xs, Z, Q, order=2):
    """Derivatives of sum_i sum_v Q[i, v] log P(y_i | xs[v], z_i).

    Slopes are ordered ``(beta_x, beta_z...)``; column ``v`` of ``Q`` goes
    with ``xs[v]`` and row ``i`` with ``(y[i], Z[i])``.
    """
    alpha = np.asarray(alpha, float)
    beta = np.asarray(beta, float)
    y = np.asarray(y, np.intp)
    Z = np.asarray(Z, float).reshape(len(y), -1)
    xs = np.asarray(xs, float)
    Q = np.asarray(Q, float)
    km1 = alpha.size
    pz = beta.size - 1
    zb = Z @ beta[1:] if pz else np.zeros(len(y))
    eta = zb[:, None] + beta[0] * xs[None, :]
    t = cell_terms(alpha, y[:, None], eta, order)
    with np.errstate(invalid="ignore"):
        terms = np.where(Q > 0, Q * t["logp"], 0.0)
    ll = float(terms.sum())
    if order < 1 or not np.isfinite(ll):
        return ll, None, None
    up = y < km1
    lw = y > 0
    gu = (Q * t["gu"]).sum(1)
    gl = (Q * t["gl"]).sum(1)
    geta = Q * (t["gu"] + t["gl"])
    ga = np.bincount(y[up], gu[up], minlength=km1)[:km1]
    ga += np.bincount(y[lw] - 1, gl[lw], minlength=km1)[:km1]
    grad = np.concatenate((ga, [float((geta @ xs).sum())], Z.T @ geta.sum(1)))
    if order < 2:
        return ll, grad, None
    huu = Q * t["huu"]
    hll = Q * t["hll"]
    hul = Q * t["hul"]
    dim = km1 + 1 + pz
    H = np.zeros((dim, dim))
    ru, rl, rul = huu.sum(1), hll.sum(1), hul.sum(1)
    diag = np.bincount(y[up], ru[up], minlength=km1)[:km1]
    diag += np.bincount(y[lw] - 1, rl[lw], minlength=km1)[:km1]
    H[np.arange(km1), np.arange(km1)] = diag
    mid = up & lw
    if km1 > 1:
        off = np.bincount(y[mid] - 1, rul[mid], minlength=km1)[: km1 - 1]
        for j in range(km1 - 1):
            H[j, j + 1] = H[j + 1, j] = off[j]
    hu_eta = huu + hul
    hl_eta = hul + hll
    u0, u1 = hu_eta.sum(1), hu_eta @ xs
    l0, l1 = hl_eta.sum(1), hl_eta @ xs
    for j in range(km1):
        su_, sl_ = y == j, y == j + 1
        row = np.empty(1 + pz)
        row[0] = u1[su_].sum() + l1[sl_].sum()
        row[1:] = Z[su_].T @ u0[su_] + Z[sl_].T @ l0[sl_]
        H[j, km1:] = row
        H[km1:, j] = row
    heta = huu + 2.0 * hul + hll
    r0 = heta.sum(1)
    r1 = heta @ xs
    r2 = heta @ (xs * xs)
    H[km1, km1] = r2.sum()
    cross = Z.T @ r1
    H[km1, km1 + 1:] = cross
    H[km1 + 1:, km1] = cross
    H[km1 + 1:, km1 + 1:] = (Z * r0[:, None]).T @ Z
    return ll, grad, H


def _dense_basis(bidx, bval, n_basis):
    n, width = bval.shape
    B = np.zeros((n, n_basis))
    rows = np.repeat(np.arange(n), width)
    cols = (bidx[:, None] + np.arange(width)[None, :]).ravel()
    keep = cols < n_basis
    np.add.at(B, (rows[keep], cols[keep]), bval.ravel()[keep])
    return B


def sieve_estep(P, bidx, bval, pmat, want_q=True):
    """E-step of the sieve EM for subjects with unmeasured exposure.

    ``P[i, v]`` is P(y_i | x_v, z_i), the basis of row ``i`` is banded:
    ``bval[i, r]`` sits in column ``bidx[i] + r``. ``pmat`` is ``d x s``.

    Returns ``(loglik, Q, A)`` where ``loglik = sum_i log sum_v P[i,v] H[i,v]``
    with ``H = B pmat.T``, ``Q[i, v] = P[i,v] H[i,v] / denom_i`` (posterior
    mass on support point ``v``) and ``A[v, l] = sum_i P[i,v] B[i,l] / denom_i``
    so that the expected latent counts are ``pmat * A``.
    """
    P = np.asarray(P, float)
    pmat = np.asarray(pmat, float)
    B = _dense_basis(np.asarray(bidx), np.asarray(bval, float), pmat.shape[1])
    H = B @ pmat.T
    PH = P * H
    denom = PH.sum(1)
    bad = np.flatnonzero(~(denom > 0))
    if bad.size:
        raise DegenerateSupportError(
            f"E-step denominator vanished for row {int(bad[0])}", index=int(bad[0])
        )
    ll = float(np.log(denom).sum())
    A = (P / denom[:, None]).T @ B
    Q = PH / denom[:, None] if want_q else None
    return ll, Q, A
