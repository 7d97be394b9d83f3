# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled residual-power kernel.

Semantics mirror ``_qcore_py.q_eval`` exactly: normal equations via a
small Cholesky factorization with a pivot-ratio bailout for nearly
dependent steering columns.  Targets counts above MAXM delegate to the
NumPy implementation.
"""

import numpy as np

from libc.math cimport cos, sin, sqrt

from . import _qcore_py

BACKEND = "cython"

DEF MAXM = 8

cdef double PIVOT_RATIO_LIMIT = 1e10

STATUS_OK = 0
STATUS_ILL_CONDITIONED = 1


def q_eval(const double[::1] x, const double[::1] y, const double[::1] u,
           const double[::1] v, const double complex[::1] z, bint want_grad):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = u.shape[0]
    if m > MAXM or m == 0:
        return _qcore_py.q_eval(np.asarray(x), np.asarray(y), np.asarray(u),
                                np.asarray(v), np.asarray(z), want_grad)

    cdef double complex a[MAXM]
    cdef double complex gram[MAXM][MAXM]
    cdef double complex chol[MAXM][MAXM]
    cdef double complex beams[MAXM]
    cdef double complex dx[MAXM]
    cdef double complex dy[MAXM]
    cdef double complex tx[MAXM][MAXM]
    cdef double complex ty[MAXM][MAXM]
    cdef double complex bhat[MAXM]
    cdef double complex work[MAXM]
    cdef double complex zk, ca, acc
    cdef double ph, energy = 0.0
    cdef double pivot, pmin = 0.0, pmax = 0.0
    cdef double xk, yk
    cdef Py_ssize_t i, j, k

    for i in range(m):
        beams[i] = 0
        dx[i] = 0
        dy[i] = 0
        for j in range(m):
            gram[i][j] = 0
            tx[i][j] = 0
            ty[i][j] = 0

    for k in range(n):
        zk = z[k]
        xk = x[k]
        yk = y[k]
        energy += zk.real * zk.real + zk.imag * zk.imag
        for i in range(m):
            ph = xk * u[i] + yk * v[i]
            a[i] = cos(ph) - 1j * sin(ph)
        for i in range(m):
            ca = a[i].conjugate()
            beams[i] = beams[i] + ca * zk
            if want_grad:
                dx[i] = dx[i] + ca * (xk * zk)
                dy[i] = dy[i] + ca * (yk * zk)
            for j in range(m):
                gram[i][j] = gram[i][j] + ca * a[j]
                if want_grad:
                    tx[i][j] = tx[i][j] + ca * (xk * a[j])
                    ty[i][j] = ty[i][j] + ca * (yk * a[j])

    # Cholesky of the Gram matrix with pivot tracking
    for i in range(m):
        pivot = gram[i][i].real
        for k in range(i):
            pivot -= chol[i][k].real * chol[i][k].real + chol[i][k].imag * chol[i][k].imag
        if pivot <= 0.0 or pivot != pivot:
            return 0.0, None, None, None, STATUS_ILL_CONDITIONED
        if i == 0:
            pmin = pivot
            pmax = pivot
        else:
            if pivot < pmin:
                pmin = pivot
            if pivot > pmax:
                pmax = pivot
        chol[i][i] = sqrt(pivot)
        for j in range(i + 1, m):
            acc = gram[j][i]
            for k in range(i):
                acc = acc - chol[j][k] * chol[i][k].conjugate()
            chol[j][i] = acc / chol[i][i].real
    if pmax / pmin > PIVOT_RATIO_LIMIT:
        return 0.0, None, None, None, STATUS_ILL_CONDITIONED

    # forward/backward solve for the fitted amplitudes
    for i in range(m):
        acc = beams[i]
        for k in range(i):
            acc = acc - chol[i][k] * work[k]
        work[i] = acc / chol[i][i].real
    for i in range(m - 1, -1, -1):
        acc = work[i]
        for k in range(i + 1, m):
            acc = acc - chol[k][i].conjugate() * bhat[k]
        bhat[i] = acc / chol[i][i].real

    cdef double fitted = 0.0
    for i in range(m):
        fitted += beams[i].conjugate().real * bhat[i].real - beams[i].conjugate().imag * bhat[i].imag
    cdef double q = energy - fitted
    if q < 0.0:
        q = 0.0

    bhat_arr = np.empty(m, dtype=np.complex128)
    cdef double complex[::1] bview = bhat_arr
    for i in range(m):
        bview[i] = bhat[i]
    if not want_grad:
        return q, bhat_arr, None, None, STATUS_OK

    grad_u = np.empty(m, dtype=np.float64)
    grad_v = np.empty(m, dtype=np.float64)
    cdef double[::1] gu = grad_u
    cdef double[::1] gv = grad_v
    for i in range(m):
        acc = dx[i]
        for k in range(m):
            acc = acc - tx[i][k] * bhat[k]
        acc = bhat[i].conjugate() * acc
        gu[i] = 2.0 * acc.imag
        acc = dy[i]
        for k in range(m):
            acc = acc - ty[i][k] * bhat[k]
        acc = bhat[i].conjugate() * acc
        gv[i] = 2.0 * acc.imag
    return q, bhat_arr, grad_u, grad_v, STATUS_OK
