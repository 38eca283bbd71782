"""Pure-numpy Jacobi kernels, used when the compiled extension is unavailable.

Both routines mirror the algorithms in ``_kernels.pyx`` step for step so the
two backends agree to rounding error. They return raw factors; sorting, sign
conventions and error handling live in :mod:`rankpress.linalg`.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND_NAME = "python"


def jacobi_svd(a: np.ndarray, max_sweeps: int, tol: float):
    """One-sided Jacobi orthogonalization of the columns of ``a`` (m >= n).

    Returns ``(a, v, sweeps, converged)`` where on exit the columns of ``a``
    are mutually orthogonal (singular vectors scaled by singular values) and
    ``v`` accumulates the right rotations. ``converged`` is True once a full
    sweep applies no rotation, i.e. every column pair satisfies
    |a_p . a_q| <= tol * |a_p| * |a_q|.
    """
    a = np.array(a, dtype=np.float64, order="C", copy=True)
    m, n = a.shape
    v = np.eye(n, dtype=np.float64)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            return a, v, sweeps, True
    return a, v, sweeps, False


def jacobi_eigh(a: np.ndarray, max_sweeps: int, tol: float):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(d, q, sweeps, converged)`` with raw (unsorted) eigenvalues
    ``d`` and eigenvectors in the columns of ``q``. Off-diagonal entries are
    annihilated while they exceed ``tol`` times the initial Frobenius norm.
    """
    a = np.array(a, dtype=np.float64, order="C", copy=True)
    n = a.shape[0]
    q = np.eye(n, dtype=np.float64)
    thresh = tol * math.sqrt(float(np.sum(a * a)))
    if thresh == 0.0:
        return np.diag(a).copy(), q, 0, True
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= thresh:
                    continue
                rotated = True
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
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
                qp = q[:, p].copy()
                qr = q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
        if not rotated:
            return np.diag(a).copy(), q, sweeps, True
    return np.diag(a).copy(), q, sweeps, False
