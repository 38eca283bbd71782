# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Jacobi kernels: one-sided SVD and symmetric eigendecomposition.

Mirrors ``_kernels_py`` (same sweep order, same rotations); the only
difference is that the inner loops run as C code.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, fabs, copysign

cnp.import_array()

BACKEND_NAME = "cython"


def jacobi_svd(a_in, int max_sweeps, double tol):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v = np.eye(n, dtype=np.float64)
    cdef Py_ssize_t p, q, k
    cdef int sweeps = 0
    cdef bint rotated, converged = False
    cdef double alpha, beta, gamma, zeta, t, c, s, xp, xq

    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    xp = a[k, p]
                    xq = a[k, q]
                    alpha += xp * xp
                    beta += xq * xq
                    gamma += xp * xq
                if alpha == 0.0 or beta == 0.0:
                    continue
                if fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    xp = a[k, p]
                    xq = a[k, q]
                    a[k, p] = c * xp - s * xq
                    a[k, q] = s * xp + c * xq
                for k in range(n):
                    xp = v[k, p]
                    xq = v[k, q]
                    v[k, p] = c * xp - s * xq
                    v[k, q] = s * xp + c * xq
        if not rotated:
            converged = True
            break
    return a, v, sweeps, converged


def jacobi_eigh(a_in, int max_sweeps, double tol):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = a.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q = np.eye(n, dtype=np.float64)
    cdef Py_ssize_t p, r, k
    cdef int sweeps = 0
    cdef bint rotated, converged = False
    cdef double fro = 0.0, thresh, apr, theta, t, c, s, app, arr, akp, akr, qp, qr

    for p in range(n):
        for r in range(n):
            fro += a[p, r] * a[p, r]
    thresh = tol * sqrt(fro)
    if thresh == 0.0:
        return np.diag(a).copy(), q, 0, True

    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if fabs(apr) <= thresh:
                    continue
                rotated = True
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = copysign(1.0, theta) / (fabs(theta) + sqrt(1.0 + theta * theta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                app = a[p, p]
                arr = a[r, r]
                a[p, p] = app - t * apr
                a[r, r] = arr + t * apr
                a[p, r] = 0.0
                a[r, p] = 0.0
                for k in range(n):
                    if k == p or k == r:
                        continue
                    akp = a[k, p]
                    akr = a[k, r]
                    a[k, p] = c * akp - s * akr
                    a[p, k] = a[k, p]
                    a[k, r] = s * akp + c * akr
                    a[r, k] = a[k, r]
                for k in range(n):
                    qp = q[k, p]
                    qr = q[k, r]
                    q[k, p] = c * qp - s * qr
                    q[k, r] = s * qp + c * qr
        if not rotated:
            converged = True
            break
    return np.diag(a).copy(), q, sweeps, converged
