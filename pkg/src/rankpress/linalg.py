"""Dense linear-algebra kernel: deterministic SVD, symmetric eigendecomposition,
and damped matrix square roots / inverse square roots.

Everything here is built on the in-repo Jacobi kernels (compiled or numpy,
see :mod:`rankpress.backend`) so that factorizations are bit-reproducible
under a fixed backend. Matrices are plain float64 ``numpy.ndarray`` objects;
callers are expected to pass finite 2-D arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import jacobi_eigh, jacobi_svd

MAX_SWEEPS = 100
ROTATION_TOL = 1e-12
EIG_CLAMP = 1e-12


class LinalgError(RuntimeError):
    """Raised when a factorization fails or a matrix violates a precondition."""


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise LinalgError(f"{name} contains NaN or Inf entries")
    return a


def check_symmetric(s: np.ndarray, name: str = "matrix", tol: float = 1e-10) -> np.ndarray:
    s = check_finite(s, name)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise LinalgError(f"{name} must be square, got shape {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
    if s.size and float(np.max(np.abs(s - s.T))) > tol * scale:
        raise LinalgError(f"{name} is not symmetric within {tol:g}")
    return 0.5 * (s + s.T)


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``M = U diag(s) V^T`` with k = min(m, n) columns.

    Singular values are descending; the largest-magnitude entry of each U
    column is positive (ties broken by lowest row index), which pins the
    factorization uniquely for distinct singular values.
    """

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    @property
    def rank_above(self) -> int:
        """Number of singular values above 1e-10 (numerical rank)."""
        return int(np.sum(self.singular_values > 1e-10))

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = len(self.singular_values) if rank is None else rank
        return (self.u[:, :r] * self.singular_values[:r]) @ self.v[:, :r].T


@dataclass(frozen=True)
class EigResult:
    """Symmetric eigendecomposition ``S = Q diag(w) Q^T``, eigenvalues descending."""

    q: np.ndarray
    eigenvalues: np.ndarray


def _fix_column_signs(u: np.ndarray, v: np.ndarray) -> None:
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]


def _complete_zero_columns(u: np.ndarray, sigma: np.ndarray) -> None:
    """Replace columns with exactly zero singular value by a deterministic
    orthonormal completion (Gram-Schmidt over canonical basis vectors)."""
    m = u.shape[0]
    for j in range(u.shape[1]):
        if sigma[j] != 0.0:
            continue
        for k in range(m):
            cand = np.zeros(m)
            cand[k] = 1.0
            cand -= u @ (u.T @ cand)
            norm = float(np.linalg.norm(cand))
            if norm > 1e-3:
                u[:, j] = cand / norm
                break
        else:  # pragma: no cover - m columns cannot all be dependent
            raise LinalgError("failed to complete orthonormal basis")


def svd(m: np.ndarray) -> SvdResult:
    """Deterministic full SVD via one-sided Jacobi.

    Raises :class:`LinalgError` if the sweep cap is hit before every column
    pair is orthogonal to relative tolerance 1e-12.
    """
    m = check_finite(m, "svd input")
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise LinalgError(f"svd requires a nonempty 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    transposed = rows < cols
    work = m.T if transposed else m

    a, v, _, converged = jacobi_svd(work, MAX_SWEEPS, ROTATION_TOL)
    if not converged:
        raise LinalgError(
            f"one-sided Jacobi SVD did not converge after {MAX_SWEEPS} sweeps "
            f"on a {rows}x{cols} matrix"
        )

    sigma = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros_like(a)
    nonzero = sigma > 0.0
    u[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    _complete_zero_columns(u, sigma)

    if transposed:
        u, v = v, u
    _fix_column_signs(u, v)
    return SvdResult(u=u, singular_values=sigma, v=v)


def eigh(s: np.ndarray) -> EigResult:
    """Deterministic symmetric eigendecomposition via cyclic Jacobi."""
    s = check_symmetric(s, "eigh input")
    w, q, _, converged = jacobi_eigh(s, MAX_SWEEPS, ROTATION_TOL)
    if not converged:
        raise LinalgError(
            f"Jacobi eigendecomposition did not converge after {MAX_SWEEPS} "
            f"sweeps on a {s.shape[0]}x{s.shape[0]} matrix"
        )
    order = np.argsort(-w, kind="stable")
    w = w[order]
    q = q[:, order]
    # Same sign convention as the SVD so eigenvectors are reproducible too.
    for j in range(q.shape[1]):
        i = int(np.argmax(np.abs(q[:, j])))
        if q[i, j] < 0.0:
            q[:, j] = -q[:, j]
    return EigResult(q=q, eigenvalues=w)


def _damped_eig(s: np.ndarray, damping: float, op: str) -> EigResult:
    s = check_symmetric(s, f"{op} input")
    if damping < 0.0:
        raise LinalgError(f"{op}: damping must be nonnegative, got {damping}")
    damped = s + damping * np.eye(s.shape[0])
    res = eigh(damped)
    if res.eigenvalues.size and float(res.eigenvalues[-1]) < -1e-10:
        raise LinalgError(
            f"{op}: statistics matrix not PSD (smallest damped eigenvalue "
            f"{res.eigenvalues[-1]:.3e})"
        )
    return res


def psd_sqrt(s: np.ndarray, damping: float) -> np.ndarray:
    """Symmetric square root of ``S + damping*I``.

    Eigenvalues of the damped matrix are clamped at 1e-12 before the square
    root so near-null modes stay finite.
    """
    res = _damped_eig(s, damping, "psd_sqrt")
    w = np.maximum(res.eigenvalues, EIG_CLAMP)
    root = (res.q * np.sqrt(w)) @ res.q.T
    return 0.5 * (root + root.T)


def psd_inv_sqrt(s: np.ndarray, damping: float) -> np.ndarray:
    """Symmetric inverse square root of ``S + damping*I``.

    Fails when the damped matrix is numerically singular; the fix is a larger
    damping value.
    """
    res = _damped_eig(s, damping, "psd_inv_sqrt")
    if res.eigenvalues.size and float(res.eigenvalues[-1]) <= EIG_CLAMP:
        raise LinalgError(
            "psd_inv_sqrt: damped matrix is near-singular (smallest eigenvalue "
            f"{res.eigenvalues[-1]:.3e}); increase damping"
        )
    w = np.maximum(res.eigenvalues, EIG_CLAMP)
    root = (res.q / np.sqrt(w)) @ res.q.T
    return 0.5 * (root + root.T)
