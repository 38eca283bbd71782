"""Independent brute-force references.

Each routine evaluates, directly and at toy scale, the exact quantity that a
fast path approximates or computes indirectly: explicit per-token curvature
from full Jacobians, central-difference weight gradients, drop-and-remeasure
loss changes, and a from-scratch linear-scan rerun of the greedy allocation.
They share no machinery with the code they check beyond plain forward/VJP
evaluation, and deliberately use naive sums instead of streaming means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .curvature import kl_hessian
from .whiten import WhitenedFactorization

MAX_ORACLE_DIM = 64
MAX_ORACLE_VOCAB = 32
MAX_ORACLE_CANDIDATES = 10_000


class OracleError(ValueError):
    pass


@dataclass
class OracleReport:
    name: str
    max_rel_error: float
    tolerance: float
    details: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "details": self.details,
        }


def explicit_layer_curvature(
    net: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    k: int,
    layer: int,
) -> np.ndarray:
    """Mean of J^T H J over tokens, with J formed column by column.

    For each token the restricted Jacobian J (K x out_dim) is materialized by
    backpropagating each canonical top-K logit direction separately, then
    sandwiched around the KL Hessian of the renormalized top-K probabilities.
    """
    out_dims = net.layer_out_dims()
    if out_dims[layer] > MAX_ORACLE_DIM or net.vocab_size > MAX_ORACLE_VOCAB:
        raise OracleError(
            f"explicit curvature limited to dims <= {MAX_ORACLE_DIM} and "
            f"vocab <= {MAX_ORACLE_VOCAB}"
        )
    batch.validate_for(net)
    dim = out_dims[layer]
    total = np.zeros((dim, dim))
    for t in range(len(batch)):
        logits, inputs, _ = netmod.forward(net, batch.inputs[t])
        indices, probs = netmod.top_k_support(logits, k)
        jac = np.zeros((k, dim))
        for j in range(k):
            seed = np.zeros(net.vocab_size)
            seed[indices[j]] = 1.0
            jac[j] = netmod._backprop_vector(net, inputs, seed, layer)
        h = kl_hessian(probs)
        total += jac.T @ h @ jac
    return total / len(batch)


def finite_diff_weight_gradient(
    net: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    layer: int,
    step: float = 1e-5,
) -> np.ndarray:
    """Central differences of the calibration loss per weight entry."""
    if not 1e-6 <= step <= 1e-4:
        raise OracleError(f"step {step} outside [1e-6, 1e-4]")
    w = net.layers[layer].weight
    grad = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            orig = w[i, j]
            w[i, j] = orig + step
            up = netmod.calibration_loss(net, batch)
            w[i, j] = orig - step
            down = netmod.calibration_loss(net, batch)
            w[i, j] = orig
            grad[i, j] = (up - down) / (2.0 * step)
    return grad


def drop_and_remeasure(
    net: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    factorizations: list[WhitenedFactorization],
    layer: int,
    component: int,
) -> float:
    """Actual calibration-loss change from zeroing one whitened singular value
    and rebuilding the layer through the unwhitening maps."""
    fact = next(f for f in factorizations if f.layer == layer)
    k = len(fact.singular_values)
    if not 0 <= component < k:
        raise OracleError(f"component {component} out of range [0, {k})")
    base = netmod.calibration_loss(net, batch)
    sigma = fact.singular_values.copy()
    sigma[component] = 0.0
    b_hat = (fact.svd.u * sigma) @ fact.svd.v.T
    w_hat = fact.left_inv() @ b_hat @ fact.right_inv()
    modified = net.clone()
    modified.layers[layer] = netmod.LayerDef.linear(w_hat, bias=net.layers[layer].bias)
    return netmod.calibration_loss(modified, batch) - base


@dataclass
class ScanLayer:
    """Per-layer input to the from-scratch allocation rerun."""

    layer: int
    m: int
    n: int
    scores: np.ndarray
    rank: int = field(init=False)

    def __post_init__(self) -> None:
        self.rank = min(self.m, self.n)


def exhaustive_pool_scan(
    scan_layers: list[ScanLayer],
    pi: float,
    eta: float,
    byte_target: int | None = None,
):
    """Re-derive the greedy drop sequence by recomputing the global argmin with
    a linear scan at every step (no heap, no shared code).

    Returns ``(drop_sequence, final_ranks, removed)`` where the sequence holds
    (layer, score) pairs.
    """
    if len(scan_layers) * max((min(l.m, l.n) for l in scan_layers), default=0) > MAX_ORACLE_CANDIDATES:
        raise OracleError("candidate pool too large for the scan oracle")

    total_params = sum(l.m * l.n for l in scan_layers)
    target = int(math.ceil(pi * total_params - 1e-9))
    mins = {l.layer: math.ceil(eta * ((l.m * l.n) // (l.m + l.n))) for l in scan_layers}

    def gain_of(l: ScanLayer) -> int:
        r_star = (l.m * l.n) // (l.m + l.n)
        if l.rank > r_star + 1:
            return 0
        if l.rank == r_star + 1:
            return l.m * l.n - r_star * (l.m + l.n)
        return l.m + l.n

    def bytes_ok() -> bool:
        if byte_target is None:
            return True
        stored_total = 0
        factored = 0
        for l in scan_layers:
            r_star = (l.m * l.n) // (l.m + l.n)
            if l.rank > r_star:
                stored_total += l.m * l.n
            else:
                stored_total += l.rank * (l.m + l.n)
                factored += l.rank * (l.m + l.n)
        c_rem = max(0, byte_target - 2 * (total_params - stored_total))
        return factored >= c_rem

    sequence: list[tuple[int, float]] = []
    removed = 0
    while removed < target or not bytes_ok():
        best = None
        for l in scan_layers:
            if l.rank <= mins[l.layer]:
                continue
            cand = (float(l.scores[l.rank - 1]), l.layer, l.rank)
            if best is None or cand < best:
                best = cand
        if best is None:
            break
        _, layer_id, _ = best
        chosen = next(l for l in scan_layers if l.layer == layer_id)
        sequence.append((layer_id, best[0]))
        removed += gain_of(chosen)
        chosen.rank -= 1
    return sequence, {l.layer: l.rank for l in scan_layers}, removed
