"""Heterogeneous rank allocation under a global parameter budget.

Each whitened singular component is scored by its first-order calibration-loss
impact |g * sigma| (g = u^T Gtilde v), and a greedy loop repeatedly drops the
globally cheapest eligible tail component. Storage is tracked with the
threshold-rank closed forms: a layer only realizes savings once its rank
crosses floor(mn/(m+n)), and layers that finish above the threshold fall back
to their dense weight.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .curvature import LayerStats
from .whiten import (
    MODE_DOUBLE,
    MODE_INPUT,
    LowRankLayer,
    WhitenedFactorization,
    truncate_and_unwhiten,
)


class AllocError(ValueError):
    pass


def threshold_rank(m: int, n: int) -> int:
    """Largest rank at which two factors are no more expensive than dense."""
    if m < 1 or n < 1:
        raise AllocError(f"invalid dims ({m}, {n})")
    return (m * n) // (m + n)


def storage_gain(m: int, n: int, r: int) -> int:
    """Parameters freed by dropping the tail component at current rank r.

    Zero above the threshold region, a one-time crossing gain at r* + 1, and
    one column-row pair (m + n) once below the threshold.
    """
    if not 1 <= r <= min(m, n):
        raise AllocError(f"rank {r} out of range for dims ({m}, {n})")
    r_star = threshold_rank(m, n)
    if r > r_star + 1:
        return 0
    if r == r_star + 1:
        return m * n - r_star * (m + n)
    return m + n


def whitened_gradient(
    g: np.ndarray, stats: LayerStats, mode: str = MODE_DOUBLE
) -> np.ndarray:
    """Pull the weight gradient into the whitened basis: C^{-1/2} G R^{-1/2}
    (one side dropped for input-only whitening, both for plain SVD)."""
    g = np.asarray(g, dtype=np.float64)
    if mode == "none":
        return g.copy()
    if stats is None or not stats.finalized:
        raise AllocError("whitened_gradient: statistics not finalized")
    out = g @ stats.r_inv_half
    if mode == MODE_DOUBLE:
        out = stats.c_inv_half @ out
    elif mode != MODE_INPUT:
        raise AllocError(f"unknown whitening mode {mode!r}")
    return out


def component_score(f: WhitenedFactorization, g_tilde: np.ndarray, i: int) -> float:
    """First-order predicted |loss change| from zeroing whitened component i."""
    k = len(f.singular_values)
    if not 0 <= i < k:
        raise AllocError(f"component index {i} out of range [0, {k})")
    g = float(f.svd.u[:, i] @ g_tilde @ f.svd.v[:, i])
    return abs(g * float(f.singular_values[i]))


@dataclass
class LayerAllocation:
    layer: int
    m: int
    n: int
    r_max: int
    r_star: int
    r_min: int
    scores: np.ndarray  # score of component i (descending-sigma order)
    rank: int


@dataclass
class CompressionPlan:
    """Outcome of the greedy loop: final ranks, ordered drop history, and the
    exact removed-parameter ledger."""

    layers: list[LayerAllocation]
    drop_history: list[tuple[int, float]]
    removed_params: int
    target_removed: int
    pruning_ratio: float
    min_rank_ratio: float
    byte_target: int | None = None
    budget_unreachable: bool = False

    @property
    def ranks(self) -> dict[int, int]:
        return {la.layer: la.rank for la in self.layers}

    @property
    def dense_fallback(self) -> set[int]:
        return {la.layer for la in self.layers if la.rank > la.r_star}

    def stored_params(self) -> int:
        total = 0
        for la in self.layers:
            if la.rank > la.r_star:
                total += la.m * la.n
            else:
                total += la.rank * (la.m + la.n)
        return total


def _byte_state(layers: list[LayerAllocation], total_params: int, byte_target: int):
    """Remaining byte budget after truncation vs bytes available from
    quantizing every factor row (one byte per stored factor parameter; the
    per-row scale/index overhead is reported in the accounting but treated as
    negligible for budget feasibility)."""
    stored_total = 0
    stored_factored = 0
    for la in layers:
        if la.rank > la.r_star:
            stored_total += la.m * la.n
        else:
            kept = la.rank * (la.m + la.n)
            stored_total += kept
            stored_factored += kept
    c_svd = 2 * (total_params - stored_total)
    c_rem = max(0, byte_target - c_svd)
    return c_rem, stored_factored


def allocate(
    factorizations: list[WhitenedFactorization],
    gradients: list[np.ndarray],
    pi: float,
    eta: float,
    byte_target: int | None = None,
) -> CompressionPlan:
    """Greedy budgeted drop loop.

    ``pi`` is the pruning ratio: the target removes ``pi * sum(m*n)``
    parameters. ``eta`` sets each layer's minimum rank ceil(eta * r*). When
    ``byte_target`` (total bytes to save, 2 bytes/param baseline) is given,
    the loop additionally continues until int8 remapping of the surviving
    factor rows can cover the remaining byte budget; this is how the
    truncation stage is sized for the hybrid modes.

    An unreachable budget is flagged on the plan, never silently dropped.
    """
    if not 0.0 <= pi < 1.0:
        raise AllocError(f"pruning ratio {pi} outside [0, 1)")
    if not 0.0 <= eta < 1.0:
        raise AllocError(f"min-rank ratio {eta} outside [0, 1)")
    if len(factorizations) != len(gradients):
        raise AllocError("one gradient per factorization required")

    layers: list[LayerAllocation] = []
    for f, g in zip(factorizations, gradients):
        m, n = f.b.shape
        r_max = min(m, n)
        r_star = threshold_rank(m, n)
        g_tilde = whitened_gradient(g, f.stats, f.mode)
        scores = np.array([component_score(f, g_tilde, i) for i in range(r_max)])
        layers.append(
            LayerAllocation(
                layer=f.layer,
                m=m,
                n=n,
                r_max=r_max,
                r_star=r_star,
                r_min=math.ceil(eta * r_star),
                scores=scores,
                rank=r_max,
            )
        )

    total_params = sum(la.m * la.n for la in layers)
    target_removed = int(math.ceil(pi * total_params - 1e-9))

    by_layer = {la.layer: la for la in layers}
    heap: list[tuple[float, int, int, int]] = []
    for la in layers:
        if la.rank > la.r_min:
            gain = storage_gain(la.m, la.n, la.rank)
            heapq.heappush(heap, (float(la.scores[la.rank - 1]), la.layer, la.rank, gain))

    def byte_ok() -> bool:
        if byte_target is None:
            return True
        c_rem, available = _byte_state(layers, total_params, byte_target)
        return available >= c_rem

    drop_history: list[tuple[int, float]] = []
    removed = 0
    while (removed < target_removed or not byte_ok()) and heap:
        score, layer_idx, rank, gain = heapq.heappop(heap)
        la = by_layer[layer_idx]
        drop_history.append((layer_idx, score))
        removed += gain
        la.rank -= 1
        if la.rank > la.r_min:
            next_gain = storage_gain(la.m, la.n, la.rank)
            heapq.heappush(
                heap, (float(la.scores[la.rank - 1]), la.layer, la.rank, next_gain)
            )

    unreachable = removed < target_removed or not byte_ok()
    return CompressionPlan(
        layers=layers,
        drop_history=drop_history,
        removed_params=removed,
        target_removed=target_removed,
        pruning_ratio=pi,
        min_rank_ratio=eta,
        byte_target=byte_target,
        budget_unreachable=unreachable,
    )


def materialize(
    plan: CompressionPlan,
    factorizations: list[WhitenedFactorization],
    network: netmod.NetworkSpec,
) -> netmod.NetworkSpec:
    """Apply a plan: replace each target layer by its truncated factors, or
    keep it dense when the final rank exceeds the storage threshold."""
    facts = {f.layer: f for f in factorizations}
    out = network.clone()
    stored = 0
    for la in plan.layers:
        layer = out.layers[la.layer]
        if la.rank > la.r_star:
            stored += la.m * la.n
            continue
        lr: LowRankLayer = truncate_and_unwhiten(facts[la.layer], la.rank)
        out.layers[la.layer] = netmod.LayerDef.lowrank(lr.a, lr.d, bias=layer.bias)
        stored += lr.param_count
    original = sum(la.m * la.n for la in plan.layers)
    if stored != original - plan.removed_params:
        raise AllocError(
            f"ledger mismatch: stored {stored} vs original {original} minus "
            f"removed {plan.removed_params}"
        )
    return out
