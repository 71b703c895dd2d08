# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same signatures and outputs."""

import numpy as np

from libc.math cimport exp, expm1, log, fabs, INFINITY

from .errors import DegenerateSupportError


cdef struct Cell:
    double logp
    double gu
    double gl
    double huu
    double hll
    double hul


cdef inline void _cdf(double t, double* F, double* S) noexcept nogil:
    cdef double e = exp(-fabs(t))
    cdef double inv = 1.0 / (1.0 + e)
    if t >= 0:
        F[0] = inv
        S[0] = e * inv
    else:
        F[0] = e * inv
        S[0] = inv


cdef inline Cell _cell(const double* alpha, int km1, long j, double eta, int order) noexcept nogil:
    cdef Cell c
    cdef double Fu = 1.0, Su = 0.0, Fl = 0.0, Sl = 1.0
    cdef double u, lo, p, du, dl
    cdef bint lo_pos = False
    if j < km1:
        u = alpha[j] + eta
        _cdf(u, &Fu, &Su)
    if j > 0:
        lo = alpha[j - 1] + eta
        _cdf(lo, &Fl, &Sl)
        lo_pos = lo > 0
    if lo_pos:
        p = Sl - Su
    else:
        p = Fu - Fl
    if p > 0:
        c.logp = log(p)
    else:
        c.logp = -INFINITY
        c.gu = c.gl = c.huu = c.hll = c.hul = 0.0
        return c
    if order < 1:
        return c
    du = Fu * Su
    dl = Fl * Sl
    c.gu = du / p
    c.gl = -dl / p
    if order < 2:
        return c
    c.huu = du * (Su - Fu) / p - c.gu * c.gu
    c.hll = -dl * (Sl - Fl) / p - c.gl * c.gl
    c.hul = -c.gu * c.gl
    return c


def po_derivs(alpha, beta, y, X, w=None, int order=2):
    cdef const double[::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const long[::1] yy = np.ascontiguousarray(y, dtype=np.int64)
    cdef Py_ssize_t n = yy.shape[0]
    cdef int km1 = a.shape[0]
    cdef int p = b.shape[0]
    cdef const double[:, ::1] XX = np.ascontiguousarray(np.asarray(X, dtype=np.float64).reshape(n, p))
    cdef const double[::1] ww
    cdef bint weighted = w is not None
    if weighted:
        ww = np.ascontiguousarray(w, dtype=np.float64)
    cdef int dim = km1 + p
    grad_np = np.zeros(dim)
    hess_np = np.zeros((dim, dim))
    cdef double[::1] g = grad_np
    cdef double[:, ::1] H = hess_np
    cdef double ll = 0.0, wi, eta, geta, heta, hue, hle
    cdef Py_ssize_t i, r, s
    cdef long j
    cdef Cell c
    with nogil:
        for i in range(n):
            wi = ww[i] if weighted else 1.0
            eta = 0.0
            for r in range(p):
                eta = eta + XX[i, r] * b[r]
            j = yy[i]
            c = _cell(&a[0], km1, j, eta, order)
            if wi == 0.0:
                continue
            ll += wi * c.logp
            if order < 1:
                continue
            if c.logp == -INFINITY:
                break
            geta = wi * (c.gu + c.gl)
            if j < km1:
                g[j] += wi * c.gu
            if j > 0:
                g[j - 1] += wi * c.gl
            for r in range(p):
                g[km1 + r] += geta * XX[i, r]
            if order < 2:
                continue
            hue = wi * (c.huu + c.hul)
            hle = wi * (c.hul + c.hll)
            heta = wi * (c.huu + 2.0 * c.hul + c.hll)
            if j < km1:
                H[j, j] += wi * c.huu
                for r in range(p):
                    H[j, km1 + r] += hue * XX[i, r]
            if j > 0:
                H[j - 1, j - 1] += wi * c.hll
                for r in range(p):
                    H[j - 1, km1 + r] += hle * XX[i, r]
            if j > 0 and j < km1:
                H[j - 1, j] += wi * c.hul
            for r in range(p):
                for s in range(r, p):
                    H[km1 + r, km1 + s] += heta * XX[i, r] * XX[i, s]
    if ll != ll or ll == -INFINITY:
        return -np.inf, None, None
    if order < 1:
        return ll, None, None
    if order < 2:
        return ll, grad_np, None
    _mirror(hess_np)
    return ll, grad_np, hess_np


cdef _mirror(object hess_np):
    cdef double[:, ::1] H = hess_np
    cdef Py_ssize_t r, s, dim = H.shape[0]
    for r in range(dim):
        for s in range(r + 1, dim):
            H[s, r] = H[r, s]


cdef inline void _split(double E, double* F, double* S) noexcept nogil:
    cdef double r, inv
    if E <= 1.0:
        inv = 1.0 / (1.0 + E)
        F[0] = E * inv
        S[0] = inv
    else:
        r = 1.0 / E
        inv = 1.0 / (1.0 + r)
        F[0] = inv
        S[0] = r * inv


cdef inline Cell _cell_e(double Eu, double El, double Dul, int km1, long j, int order) noexcept nogil:
    # Eu = exp(alpha_j + eta), El = exp(alpha_{j-1} + eta), Dul = Eu - El without cancellation
    cdef Cell c
    cdef double Fu = 1.0, Su = 0.0, Fl = 0.0, Sl = 1.0, p, du, dl
    if j < km1:
        _split(Eu, &Fu, &Su)
    if j > 0:
        _split(El, &Fl, &Sl)
    if j == 0:
        p = Fu
    elif j == km1:
        p = Sl
    else:
        p = Dul * Su * Sl
    if p > 0:
        c.logp = log(p)
    else:
        c.logp = -INFINITY
        c.gu = c.gl = c.huu = c.hll = c.hul = 0.0
        return c
    if order < 1:
        return c
    du = Fu * Su
    dl = Fl * Sl
    c.gu = du / p
    c.gl = -dl / p
    if order < 2:
        return c
    c.huu = du * (Su - Fu) / p - c.gu * c.gu
    c.hll = -dl * (Sl - Fl) / p - c.gl * c.gl
    c.hul = -c.gu * c.gl
    return c


cdef inline double _prob_e(double Eu, double El, double Dul, int km1, long j) noexcept nogil:
    if j == 0:
        return Eu / (1.0 + Eu) if Eu <= 1.0 else 1.0 / (1.0 + 1.0 / Eu)
    if j == km1:
        return 1.0 / (1.0 + El)
    return Dul / ((1.0 + Eu) * (1.0 + El))


cdef inline bint _row_factors(const double* a, int km1, long j, double zb, double mx,
                              double* eu, double* el, double* cj) noexcept nogil:
    cdef double tu = 0.0, tl = 0.0
    eu[0] = 0.0
    el[0] = 0.0
    cj[0] = 1.0
    if j < km1:
        tu = a[j] + zb
        if fabs(tu) + mx > 300.0:
            return False
        eu[0] = exp(tu)
    if j > 0:
        tl = a[j - 1] + zb
        if fabs(tl) + mx > 300.0:
            return False
        el[0] = exp(tl)
    if j > 0 and j < km1:
        cj[0] = -expm1(a[j - 1] - a[j])
    return True


def grid_probs(alpha, beta, y, xs, Z):
    cdef const double[::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const long[::1] yy = np.ascontiguousarray(y, dtype=np.int64)
    cdef const double[::1] xg = np.ascontiguousarray(xs, dtype=np.float64)
    cdef Py_ssize_t n = yy.shape[0], d = xg.shape[0]
    cdef int km1 = a.shape[0], pz = b.shape[0] - 1
    cdef const double[:, ::1] ZZ = np.ascontiguousarray(np.asarray(Z, dtype=np.float64).reshape(n, pz))
    out_np = np.empty((n, d))
    cdef double[:, ::1] out = out_np
    cdef double bx = b[0]
    bxs = bx * np.asarray(xg)
    cdef double mx = float(np.abs(bxs).max()) if d else 0.0
    cdef const double[::1] ex = np.exp(bxs)
    cdef double zb, eu, el, cj, Eu, El
    cdef Py_ssize_t i, v, r
    cdef long j
    cdef Cell c
    with nogil:
        for i in range(n):
            zb = 0.0
            for r in range(pz):
                zb = zb + ZZ[i, r] * b[1 + r]
            j = yy[i]
            if _row_factors(&a[0], km1, j, zb, mx, &eu, &el, &cj):
                for v in range(d):
                    Eu = eu * ex[v]
                    El = el * ex[v]
                    out[i, v] = _prob_e(Eu, El, Eu * cj, km1, j)
            else:
                for v in range(d):
                    c = _cell(&a[0], km1, j, zb + bx * xg[v], 0)
                    out[i, v] = exp(c.logp)
    return out_np


def grid_po_derivs(alpha, beta, y, xs, Z, Q, int order=2):
    cdef const double[::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const long[::1] yy = np.ascontiguousarray(y, dtype=np.int64)
    cdef const double[::1] xg = np.ascontiguousarray(xs, dtype=np.float64)
    cdef Py_ssize_t n = yy.shape[0], d = xg.shape[0]
    cdef int km1 = a.shape[0], pz = b.shape[0] - 1
    cdef const double[:, ::1] ZZ = np.ascontiguousarray(np.asarray(Z, dtype=np.float64).reshape(n, pz))
    cdef const double[:, ::1] QQ = np.ascontiguousarray(Q, dtype=np.float64)
    cdef int dim = km1 + 1 + pz
    grad_np = np.zeros(dim)
    hess_np = np.zeros((dim, dim))
    cdef double[::1] g = grad_np
    cdef double[:, ::1] H = hess_np
    cdef double bx = b[0]
    bxs = bx * np.asarray(xg)
    cdef double mx = float(np.abs(bxs).max()) if d else 0.0
    cdef const double[::1] ex = np.exp(bxs)
    cdef double ll = 0.0, zb, q, xv, t, eu, el, cj, Eu, El
    cdef double sgu, sgl, ge0, ge1, suu, sll, sul, ue0, ue1, le0, le1, he0, he1, he2
    cdef Py_ssize_t i, v, r, s
    cdef long j
    cdef bint bad = False, fast
    cdef Cell c
    with nogil:
        for i in range(n):
            zb = 0.0
            for r in range(pz):
                zb = zb + ZZ[i, r] * b[1 + r]
            j = yy[i]
            fast = _row_factors(&a[0], km1, j, zb, mx, &eu, &el, &cj)
            sgu = sgl = ge0 = ge1 = 0.0
            suu = sll = sul = ue0 = ue1 = le0 = le1 = he0 = he1 = he2 = 0.0
            for v in range(d):
                q = QQ[i, v]
                if q == 0.0:
                    continue
                xv = xg[v]
                if fast:
                    Eu = eu * ex[v]
                    El = el * ex[v]
                    c = _cell_e(Eu, El, Eu * cj, km1, j, order)
                else:
                    c = _cell(&a[0], km1, j, zb + bx * xv, order)
                if c.logp == -INFINITY:
                    bad = True
                    break
                ll += q * c.logp
                if order < 1:
                    continue
                sgu += q * c.gu
                sgl += q * c.gl
                t = q * (c.gu + c.gl)
                ge0 += t
                ge1 += t * xv
                if order < 2:
                    continue
                suu += q * c.huu
                sll += q * c.hll
                sul += q * c.hul
                t = q * (c.huu + c.hul)
                ue0 += t
                ue1 += t * xv
                t = q * (c.hul + c.hll)
                le0 += t
                le1 += t * xv
                t = q * (c.huu + 2.0 * c.hul + c.hll)
                he0 += t
                he1 += t * xv
                he2 += t * xv * xv
            if bad:
                break
            if order < 1:
                continue
            if j < km1:
                g[j] += sgu
            if j > 0:
                g[j - 1] += sgl
            g[km1] += ge1
            for r in range(pz):
                g[km1 + 1 + r] += ge0 * ZZ[i, r]
            if order < 2:
                continue
            if j < km1:
                H[j, j] += suu
                H[j, km1] += ue1
                for r in range(pz):
                    H[j, km1 + 1 + r] += ue0 * ZZ[i, r]
            if j > 0:
                H[j - 1, j - 1] += sll
                H[j - 1, km1] += le1
                for r in range(pz):
                    H[j - 1, km1 + 1 + r] += le0 * ZZ[i, r]
            if j > 0 and j < km1:
                H[j - 1, j] += sul
            H[km1, km1] += he2
            for r in range(pz):
                H[km1, km1 + 1 + r] += he1 * ZZ[i, r]
                for s in range(r, pz):
                    H[km1 + 1 + r, km1 + 1 + s] += he0 * ZZ[i, r] * ZZ[i, s]
    if bad:
        return -np.inf, None, None
    if order < 1:
        return ll, None, None
    if order < 2:
        return ll, grad_np, None
    _mirror(hess_np)
    return ll, grad_np, hess_np


def sieve_estep(P, bidx, bval, pmat, bint want_q=True):
    cdef const double[:, ::1] PP = np.ascontiguousarray(P, dtype=np.float64)
    cdef const long[::1] first = np.ascontiguousarray(bidx, dtype=np.int64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(bval, dtype=np.float64)
    cdef const double[:, ::1] pm = np.ascontiguousarray(pmat, dtype=np.float64)
    cdef Py_ssize_t n = PP.shape[0], d = PP.shape[1], width = bv.shape[1]
    cdef Py_ssize_t ns = pm.shape[1]
    A_np = np.zeros((d, ns))
    cdef double[:, ::1] A = A_np
    Q_np = np.empty((n, d)) if want_q else np.empty((0, 0))
    cdef double[:, ::1] QQ = Q_np
    Hrow_np = np.empty(d)
    cdef double[::1] Hrow = Hrow_np
    cdef double ll = 0.0, h, denom, inv, pv
    cdef Py_ssize_t i, v, r, l0, width_i
    cdef Py_ssize_t bad = -1
    with nogil:
        for i in range(n):
            l0 = first[i]
            width_i = width
            if l0 + width_i > ns:
                width_i = ns - l0
            denom = 0.0
            for v in range(d):
                h = 0.0
                for r in range(width_i):
                    h = h + bv[i, r] * pm[v, l0 + r]
                Hrow[v] = h
                denom = denom + PP[i, v] * h
            if not denom > 0:
                bad = i
                break
            ll += log(denom)
            inv = 1.0 / denom
            for v in range(d):
                pv = PP[i, v] * inv
                if want_q:
                    QQ[i, v] = pv * Hrow[v]
                for r in range(width_i):
                    A[v, l0 + r] += pv * bv[i, r]
    if bad >= 0:
        raise DegenerateSupportError(f"E-step denominator vanished for row {bad}", index=int(bad))
    return ll, (Q_np if want_q else None), A_np
