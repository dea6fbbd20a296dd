# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled q-evaluation kernel.

Mirrors the accumulation order of the numpy fallback (_ref.py): feature index
ascending, hidden unit ascending, so both backends chunk-invariantly reduce.
Releases the GIL over the batch loop so the streaming verifier can fan out
threads.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, tanh, INFINITY

BACKEND = "compiled"


def q_batch(theta0, b0, theta1, b1, sigma_sq, X, FX, GX, mask_s, mask_u,
            delta, gamma, margin, u_lo, u_hi):
    """See sncbf.kernels._ref.q_batch for the contract."""
    cdef double[:, ::1] t0 = np.ascontiguousarray(theta0, dtype=np.float64)
    cdef double[::1] b0v = np.ascontiguousarray(b0, dtype=np.float64)
    cdef double[::1] t1 = np.ascontiguousarray(theta1, dtype=np.float64)
    cdef double[::1] ssq = np.ascontiguousarray(sigma_sq, dtype=np.float64)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] FXv = np.ascontiguousarray(FX, dtype=np.float64)
    cdef double[:, :, ::1] GXv = np.ascontiguousarray(GX, dtype=np.float64)
    cdef cnp.uint8_t[::1] ms = np.ascontiguousarray(mask_s, dtype=np.uint8)
    cdef cnp.uint8_t[::1] mu = np.ascontiguousarray(mask_u, dtype=np.uint8)
    cdef double[::1] ulo = np.array(
        np.broadcast_to(np.asarray(u_lo, dtype=np.float64), (GXv.shape[2],)))
    cdef double[::1] uhi = np.array(
        np.broadcast_to(np.asarray(u_hi, dtype=np.float64), (GXv.shape[2],)))

    cdef Py_ssize_t B = Xv.shape[0]
    cdef Py_ssize_t n = t0.shape[1]
    cdef Py_ssize_t p = t0.shape[0]
    cdef Py_ssize_t m = GXv.shape[2]
    cdef double b1c = b1, dlt = delta, gam = gamma, marg = margin

    q1 = np.empty(B); q2 = np.empty(B); q3 = np.empty(B)
    hout = np.empty(B); aout = np.empty(B)
    uout = np.zeros((B, m))
    infout = np.zeros(B, dtype=np.uint8)
    cdef double[::1] q1v = q1, q2v = q2, q3v = q3, hv = hout, av = aout
    cdef double[:, ::1] uv = uout
    cdef cnp.uint8_t[::1] infv = infout

    sbuf = np.zeros(p)
    cdef double[::1] s = sbuf
    cdef Py_ssize_t i, j, k, mm
    cdef double acc, aij, ph, ph1, ph2, hval, htval, aval, slack, bb, bu, sc, ui
    # scratch per row
    jbuf = np.zeros(n); bbuf = np.zeros(16 if m < 16 else m)
    cdef double[::1] jac = jbuf
    cdef double[::1] bvec = bbuf

    with nogil:
        for k in range(n):
            for j in range(p):
                s[j] += ssq[k] * t0[j, k] * t0[j, k]
        for i in range(B):
            hval = b1c
            htval = 0.0
            for k in range(n):
                jac[k] = 0.0
            for mm in range(m):
                bvec[mm] = 0.0
            for j in range(p):
                aij = b0v[j]
                for k in range(n):
                    aij += Xv[i, k] * t0[j, k]
                if aij > 30.0:
                    ph = aij + log1p(exp(-aij))
                else:
                    ph = log1p(exp(aij))
                ph1 = 0.5 * (1.0 + tanh(0.5 * aij))
                ph2 = ph1 * (1.0 - ph1)
                hval += t1[j] * ph
                for k in range(n):
                    jac[k] += (t1[j] * t0[j, k]) * ph1
                htval += (t1[j] * s[j]) * ph2
            aval = 0.0
            for k in range(n):
                aval += jac[k] * FXv[i, k]
            aval += 0.5 * htval
            aval += gam * hval
            for mm in range(m):
                acc = 0.0
                for k in range(n):
                    acc += jac[k] * GXv[i, k, mm]
                bvec[mm] = acc
            slack = aval - marg
            bb = 0.0
            for mm in range(m):
                bb += bvec[mm] * bvec[mm]
            bu = 0.0
            if slack < 0.0:
                if bb == 0.0:
                    infv[i] = 1
                else:
                    sc = -slack / bb
                    for mm in range(m):
                        ui = bvec[mm] * sc
                        if ui < ulo[mm]:
                            ui = ulo[mm]
                        if ui > uhi[mm]:
                            ui = uhi[mm]
                        uv[i, mm] = ui
                        bu += bvec[mm] * ui
                    if aval + bu - marg < -1e-9:
                        infv[i] = 1
                        for mm in range(m):
                            uv[i, mm] = 0.0
                        bu = 0.0
            q3v[i] = -(aval + bu)
            hv[i] = hval
            av[i] = aval
            q1v[i] = -hval if ms[i] else -INFINITY
            q2v[i] = hval + dlt if mu[i] else -INFINITY
    return q1, q2, q3, hout, aout, uout, infout
