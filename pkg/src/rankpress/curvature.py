"""Per-layer calibration statistics: input covariance R and output-side KL
curvature C, accumulated as running means over tokens, plus their damped
(inverse) square roots.

C is built without forming any Jacobian: the token-level KL Hessian on the
top-K support factors as H = A A^T with A = Diag(sqrt(p)) (I - s s^T), so
sweeping the K columns of A through vector-Jacobian products and averaging
the outer products of the pulled-back vectors reproduces J^T H J exactly on
that support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .linalg import LinalgError, check_finite, psd_inv_sqrt, psd_sqrt

DEFAULT_RELATIVE_DAMPING = 1e-4
DAMPING_FLOOR = 1e-8


class StatsError(ValueError):
    """Statistics accumulated or used inconsistently."""


def kl_hessian(p: np.ndarray) -> np.ndarray:
    """Hessian of KL(p || softmax(z)) at the matching logits: Diag(p) - p p^T."""
    p = check_finite(np.asarray(p, dtype=np.float64), "probability vector")
    if np.any(p < -1e-12):
        raise StatsError("probability vector has negative entries")
    if abs(float(np.sum(p)) - 1.0) > 1e-10:
        raise StatsError(f"probability vector sums to {float(np.sum(p))!r}, not 1")
    return np.diag(p) - np.outer(p, p)


def probe_factor(p_topk: np.ndarray) -> np.ndarray:
    """Closed-form factor A with A A^T = kl_hessian(p): Diag(sqrt(p))(I - s s^T),
    s = sqrt(p). Valid because p is renormalized, so ||s|| = 1 and the
    projector is idempotent."""
    p_topk = np.asarray(p_topk, dtype=np.float64)
    if np.any(p_topk < -1e-12):
        raise StatsError("probability vector has negative entries")
    if abs(float(np.sum(p_topk)) - 1.0) > 1e-10:
        raise StatsError("top-k probabilities are not renormalized")
    s = np.sqrt(np.maximum(p_topk, 0.0))
    proj = np.eye(len(s)) - np.outer(s, s)
    return s[:, None] * proj


@dataclass
class LayerStats:
    """Streaming statistics for one target layer.

    R (input_dim x input_dim) and C (output_dim x output_dim) are running
    means with independent token counters, since the two accumulation passes
    are separate operations; the standard pipeline feeds both from the same
    token stream so the counters agree.
    """

    layer: int
    input_dim: int
    output_dim: int
    r: np.ndarray = field(init=False)
    c: np.ndarray = field(init=False)
    r_tokens: int = 0
    c_tokens: int = 0
    lambda_r: float | None = None
    lambda_c: float | None = None
    r_half: np.ndarray | None = None
    r_inv_half: np.ndarray | None = None
    c_half: np.ndarray | None = None
    c_inv_half: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.r = np.zeros((self.input_dim, self.input_dim))
        self.c = np.zeros((self.output_dim, self.output_dim))

    @property
    def token_count(self) -> int:
        return self.r_tokens

    @property
    def finalized(self) -> bool:
        return self.r_half is not None

    def add_input_sample(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise StatsError(
                f"layer {self.layer}: input sample dim {x.shape} vs {self.input_dim}"
            )
        self.r_tokens += 1
        self.r += (np.outer(x, x) - self.r) / self.r_tokens

    def add_curvature_sample(self, token_curvature: np.ndarray) -> None:
        if token_curvature.shape != (self.output_dim, self.output_dim):
            raise StatsError(f"layer {self.layer}: curvature sample shape mismatch")
        self.c_tokens += 1
        self.c += (token_curvature - self.c) / self.c_tokens


def accumulate_input_covariance(stats: LayerStats, x: np.ndarray) -> None:
    stats.add_input_sample(x)


def accumulate_output_curvature(
    net: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    k: int,
    stats: dict[int, LayerStats],
) -> None:
    """Accumulate C for every target layer over the batch.

    Per token: take the top-K support of the uncompressed logits, form the
    probe factor, scatter its K columns into vocabulary space, and pull all
    probes back through one reverse pass per token. The mean over tokens of
    the summed outer products equals the mean of J^T H J on the support.
    """
    batch.validate_for(net)
    if not 1 <= k <= net.vocab_size:
        raise StatsError(f"top-k {k} out of range for vocab {net.vocab_size}")
    for idx in net.target_layers:
        if idx not in stats:
            raise StatsError(f"no LayerStats allocated for target layer {idx}")

    for t in range(len(batch)):
        logits, inputs, _ = netmod.forward(net, batch.inputs[t])
        indices, probs = netmod.top_k_support(logits, k)
        probe = probe_factor(probs)
        seed = np.zeros((net.vocab_size, k))
        seed[indices, :] = probe
        pulled = netmod.vjp_to_layer_outputs(net, inputs, seed)
        for idx, g in pulled.items():
            stats[idx].add_curvature_sample(g @ g.T)


def accumulate_statistics(
    net: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    k: int,
) -> dict[int, LayerStats]:
    """Single calibration pass: R and C for every target layer, same token order."""
    batch.validate_for(net)
    out_dims = net.layer_out_dims()
    stats = {
        idx: LayerStats(
            layer=idx,
            input_dim=net.layers[idx].weight.shape[1],
            output_dim=out_dims[idx],
        )
        for idx in net.target_layers
    }
    for t in range(len(batch)):
        _, inputs, _ = netmod.forward(net, batch.inputs[t])
        for idx in net.target_layers:
            stats[idx].add_input_sample(inputs[idx])
    accumulate_output_curvature(net, batch, k, stats)
    return stats


def resolve_damping(matrix: np.ndarray, value: float | None) -> float:
    """Explicit damping passes through; None means relative default
    (1e-4 x mean diagonal) with an absolute floor of 1e-8."""
    if value is not None:
        if value < 0.0:
            raise StatsError(f"damping must be nonnegative, got {value}")
        return float(value)
    mean_diag = float(np.mean(np.diag(matrix))) if matrix.size else 0.0
    return max(DEFAULT_RELATIVE_DAMPING * mean_diag, DAMPING_FLOOR)


def finalize(
    stats: LayerStats,
    lambda_r: float | None = None,
    lambda_c: float | None = None,
) -> None:
    """Populate the four damped (inverse) square roots.

    Raises when no tokens were accumulated or the damped matrices are not PSD
    (propagated from the linalg kernels).
    """
    if stats.token_count <= 0:
        raise StatsError(f"layer {stats.layer}: no tokens accumulated")
    stats.lambda_r = resolve_damping(stats.r, lambda_r)
    stats.lambda_c = resolve_damping(stats.c, lambda_c)
    try:
        stats.r_half = psd_sqrt(stats.r, stats.lambda_r)
        stats.r_inv_half = psd_inv_sqrt(stats.r, stats.lambda_r)
        stats.c_half = psd_sqrt(stats.c, stats.lambda_c)
        stats.c_inv_half = psd_inv_sqrt(stats.c, stats.lambda_c)
    except LinalgError as exc:
        raise StatsError(f"layer {stats.layer}: {exc}") from exc
