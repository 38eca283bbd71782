"""Doubly whitened factorization of a weight matrix and its rank-r truncation.

The whitened matrix is B = C^{1/2} W R^{1/2}; truncating B by SVD and undoing
the whitening gives the loss-aware low-rank approximation. The weighted error
metric 0.5 ||C^{1/2} (W - What) R^{1/2}||_F^2 is what truncation minimizes. An
input-only mode (left map = identity) is kept as the ablation baseline, and a
mode with both maps identity degenerates to plain SVD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import LayerStats
from .linalg import SvdResult, check_finite, svd

MODE_NONE = "none"
MODE_INPUT = "input"
MODE_DOUBLE = "double"
WHITENING_MODES = (MODE_NONE, MODE_INPUT, MODE_DOUBLE)


class WhitenError(ValueError):
    pass


@dataclass
class WhitenedFactorization:
    """SVD of the whitened weight, plus the maps needed to undo the whitening."""

    layer: int
    mode: str
    b: np.ndarray
    svd: SvdResult
    stats: LayerStats | None

    @property
    def singular_values(self) -> np.ndarray:
        return self.svd.singular_values

    def left_inv(self) -> np.ndarray:
        if self.mode == MODE_DOUBLE:
            return self.stats.c_inv_half
        return np.eye(self.b.shape[0])

    def right_inv(self) -> np.ndarray:
        if self.mode in (MODE_DOUBLE, MODE_INPUT):
            return self.stats.r_inv_half
        return np.eye(self.b.shape[1])


@dataclass
class LowRankLayer:
    """Retained factors: What = A D^T, A (m x r) absorbing the singular values."""

    a: np.ndarray
    d: np.ndarray
    rank: int

    def dense(self) -> np.ndarray:
        return self.a @ self.d.T

    @property
    def param_count(self) -> int:
        return self.rank * (self.a.shape[0] + self.d.shape[0])


def _require_finalized(stats: LayerStats | None, op: str) -> LayerStats:
    if stats is None or not stats.finalized:
        raise WhitenError(f"{op}: statistics not finalized")
    return stats


def whiten_with_mode(
    w: np.ndarray, stats: LayerStats | None, mode: str, layer: int = -1
) -> WhitenedFactorization:
    w = check_finite(w, "weight")
    if mode not in WHITENING_MODES:
        raise WhitenError(f"unknown whitening mode {mode!r}")
    if mode == MODE_NONE:
        b = w.copy()
    else:
        stats = _require_finalized(stats, "whiten")
        if stats.input_dim != w.shape[1] or (
            mode == MODE_DOUBLE and stats.output_dim != w.shape[0]
        ):
            raise WhitenError(
                f"stats dims ({stats.output_dim}, {stats.input_dim}) do not match "
                f"weight shape {w.shape}"
            )
        b = w @ stats.r_half
        if mode == MODE_DOUBLE:
            b = stats.c_half @ b
    return WhitenedFactorization(layer=layer, mode=mode, b=b, svd=svd(b), stats=stats)


def whiten(w: np.ndarray, stats: LayerStats, layer: int = -1) -> WhitenedFactorization:
    """Double-sided whitening: B = C^{1/2} W R^{1/2}."""
    return whiten_with_mode(w, stats, MODE_DOUBLE, layer)


def input_only_whiten(w: np.ndarray, stats: LayerStats, layer: int = -1) -> WhitenedFactorization:
    """Ablation baseline: whiten with input statistics only (left map identity)."""
    return whiten_with_mode(w, stats, MODE_INPUT, layer)


def truncate_and_unwhiten(f: WhitenedFactorization, rank: int) -> LowRankLayer:
    """Keep the top ``rank`` whitened components and map back:
    A = C^{-1/2} U_r Sigma_r, D = R^{-1/2} V_r."""
    k = len(f.singular_values)
    if not 1 <= rank <= k:
        raise WhitenError(f"rank {rank} out of range [1, {k}]")
    u_r = f.svd.u[:, :rank]
    v_r = f.svd.v[:, :rank]
    sigma_r = f.singular_values[:rank]
    a = f.left_inv() @ (u_r * sigma_r)
    d = f.right_inv() @ v_r
    return LowRankLayer(a=a, d=d, rank=rank)


def whitened_error(w: np.ndarray, w_hat: np.ndarray, stats: LayerStats) -> float:
    """0.5 ||C^{1/2} (W - What) R^{1/2}||_F^2, the double-sided error metric.

    Equal to 0.5 tr(dW R dW^T C) by cyclic invariance of the trace, which is
    what the tests cross-check.
    """
    stats = _require_finalized(stats, "whitened_error")
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise WhitenError(f"shape mismatch {w.shape} vs {w_hat.shape}")
    delta = stats.c_half @ (w - w_hat) @ stats.r_half
    return 0.5 * float(np.sum(delta * delta))
