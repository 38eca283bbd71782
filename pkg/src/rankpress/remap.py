"""Hybrid low-rank / int8 compression.

After truncation, every row of every retained factor is a quantization
candidate. A row's cost is the first-order predicted calibration-loss change
|<gamma, Q8(row) - row>| under symmetric per-row absmax int8; rows are chosen
greedily (cheapest first, or cheapest per saved byte when row lengths differ)
until the remaining byte budget after truncation is covered.

Byte accounting is exact: an fp row costs 2 bytes per parameter
(fp16-equivalent baseline), a quantized row costs 1 byte per parameter plus a
4-byte scale and a 4-byte row index. The budget feasibility math counts the
1-byte-per-parameter saving only; the 8-byte row overhead is carried in the
accounting but is treated as negligible when sizing budgets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import net as netmod
from .allocate import CompressionPlan, allocate, materialize
from .curvature import LayerStats
from .whiten import WhitenedFactorization

BYTES_PER_FP_PARAM = 2
BYTES_PER_INT8_PARAM = 1
BYTES_PER_ROW_OVERHEAD = 8  # 4-byte scale + 4-byte row index


class RemapError(ValueError):
    pass


def quantize_dequantize_row(row: np.ndarray):
    """Symmetric per-row absmax int8 round trip.

    Returns ``(codes, scale, dequant)`` with scale = max|row| / 127 (1.0 for an
    all-zero row) and codes clamped to [-127, 127].
    """
    row = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise RemapError("row contains NaN or Inf")
    amax = float(np.max(np.abs(row))) if row.size else 0.0
    scale = amax / 127.0 if amax > 0.0 else 1.0
    codes = np.clip(np.rint(row / scale), -127, 127).astype(np.int8)
    return codes, scale, codes.astype(np.float64) * scale


def row_score(gamma: np.ndarray, row: np.ndarray) -> float:
    """Predicted |loss change| from quantizing one factor row."""
    gamma = np.asarray(gamma, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    if gamma.shape != row.shape:
        raise RemapError(f"gradient length {gamma.shape} vs row length {row.shape}")
    _, _, deq = quantize_dequantize_row(row)
    return abs(float(gamma @ (deq - row)))


@dataclass(frozen=True)
class RowCandidate:
    score: float
    byte_saving: int
    layer: int
    factor: str  # "A" or "D"
    row_index: int
    magnitude: float = 0.0


@dataclass(frozen=True)
class QuantizedRow:
    layer: int
    factor: str
    row_index: int
    codes: np.ndarray
    scale: float
    score: float

    def dequant(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale


@dataclass
class HybridLayer:
    """Byte ledger for one factored layer after remapping."""

    layer: int
    rank: int
    m: int
    n: int
    quantized_rows: list[QuantizedRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return self.rank * (self.m + self.n)

    @property
    def int8_params(self) -> int:
        return sum(len(q.codes) for q in self.quantized_rows)

    @property
    def byte_count(self) -> int:
        fp = self.total_params - self.int8_params
        return (
            BYTES_PER_FP_PARAM * fp
            + BYTES_PER_INT8_PARAM * self.int8_params
            + BYTES_PER_ROW_OVERHEAD * len(self.quantized_rows)
        )


@dataclass(frozen=True)
class RemapBudget:
    """Byte targets: total bytes to save, bytes already saved by truncation,
    and the remainder quantization must cover."""

    c_target: int
    c_svd: int

    @property
    def c_rem(self) -> int:
        return max(0, self.c_target - self.c_svd)

    @staticmethod
    def from_ratio(total_params: int, maintenance_ratio: float, removed_params: int) -> "RemapBudget":
        if not 0.0 < maintenance_ratio < 1.0:
            raise RemapError(f"maintenance ratio {maintenance_ratio} outside (0, 1)")
        c_target = int(math.ceil((1.0 - maintenance_ratio) * BYTES_PER_FP_PARAM * total_params - 1e-9))
        return RemapBudget(c_target=c_target, c_svd=BYTES_PER_FP_PARAM * removed_params)


def _greedy_cover(candidates, key, c_rem: int):
    chosen = []
    saved = 0
    for cand in sorted(candidates, key=key):
        if saved >= c_rem:
            break
        chosen.append(cand)
        saved += cand.byte_saving
    return chosen


def select_rows(candidates: list[RowCandidate], budget: RemapBudget) -> list[RowCandidate]:
    """Greedy budgeted selection.

    Ascending score when every candidate saves the same bytes, ascending
    score-per-saved-byte otherwise; ties broken by (layer, factor, row_index).
    Empty when nothing remains to save; an impossible budget raises with the
    exact shortfall.
    """
    c_rem = budget.c_rem
    if c_rem == 0:
        return []
    for cand in candidates:
        if cand.byte_saving <= 0:
            raise RemapError(f"candidate with nonpositive byte saving: {cand}")
    total = sum(c.byte_saving for c in candidates)
    if total < c_rem:
        raise RemapError(
            f"cannot meet byte budget: available savings {total} fall short of "
            f"{c_rem} by {c_rem - total} bytes"
        )
    savings = {c.byte_saving for c in candidates}
    if len(savings) <= 1:
        key = lambda c: (c.score, c.layer, c.factor, c.row_index)
    else:
        key = lambda c: (c.score / c.byte_saving, c.layer, c.factor, c.row_index)
    return _greedy_cover(candidates, key, c_rem)


def _factored_layers(model: netmod.NetworkSpec) -> list[int]:
    return [i for i in model.target_layers if model.layers[i].kind == "lowrank"]


def build_candidates(
    model: netmod.NetworkSpec,
    row_gradients: dict[int, tuple[np.ndarray, np.ndarray]],
) -> list[RowCandidate]:
    """All rows of every retained factor, scored; dense-fallback layers are
    not remapped."""
    out: list[RowCandidate] = []
    for idx in _factored_layers(model):
        layer = model.layers[idx]
        ga, gd = row_gradients[idx]
        rank = layer.rank
        for name, mat, grad in (("A", layer.a_factor, ga), ("D", layer.d_factor, gd)):
            if grad.shape != mat.shape:
                raise RemapError(f"layer {idx}: {name} gradient shape mismatch")
            for i in range(mat.shape[0]):
                out.append(
                    RowCandidate(
                        score=row_score(grad[i], mat[i]),
                        byte_saving=rank,
                        layer=idx,
                        factor=name,
                        row_index=i,
                        magnitude=float(np.linalg.norm(mat[i])),
                    )
                )
    return out


def apply_remap(
    model: netmod.NetworkSpec,
    row_gradients: dict[int, tuple[np.ndarray, np.ndarray]],
    budget: RemapBudget,
    selection: str = "loss",
):
    """Quantize selected factor rows in place of their fp values.

    ``selection="loss"`` uses the predicted-loss greedy rule; ``"plain"`` is
    the magnitude heuristic (largest-norm rows first) kept as the ablation
    baseline. Returns ``(hybrid_model, hybrid_layers, selected)``.
    """
    candidates = build_candidates(model, row_gradients)
    if selection == "loss":
        chosen = select_rows(candidates, budget)
    elif selection == "plain":
        c_rem = budget.c_rem
        if c_rem == 0:
            chosen = []
        else:
            total = sum(c.byte_saving for c in candidates)
            if total < c_rem:
                raise RemapError(
                    f"cannot meet byte budget: available savings {total} fall "
                    f"short of {c_rem} by {c_rem - total} bytes"
                )
            chosen = _greedy_cover(
                candidates,
                lambda c: (-c.magnitude, c.layer, c.factor, c.row_index),
                c_rem,
            )
    else:
        raise RemapError(f"unknown selection mode {selection!r}")

    hybrid = model.clone()
    ledgers = {
        idx: HybridLayer(
            layer=idx,
            rank=hybrid.layers[idx].rank,
            m=hybrid.layers[idx].a_factor.shape[0],
            n=hybrid.layers[idx].d_factor.shape[0],
        )
        for idx in _factored_layers(model)
    }
    for cand in chosen:
        layer = hybrid.layers[cand.layer]
        mat = layer.a_factor if cand.factor == "A" else layer.d_factor
        codes, scale, deq = quantize_dequantize_row(mat[cand.row_index])
        mat[cand.row_index] = deq
        ledgers[cand.layer].quantized_rows.append(
            QuantizedRow(
                layer=cand.layer,
                factor=cand.factor,
                row_index=cand.row_index,
                codes=codes,
                scale=scale,
                score=cand.score,
            )
        )
    return hybrid, [ledgers[i] for i in sorted(ledgers)], chosen


def factor_row_gradients(
    model: netmod.NetworkSpec, batch: netmod.CalibrationBatch
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Calibration-loss gradients w.r.t. the A and D factors of every factored
    layer, computed at the compressed model (before any quantization)."""
    _, grads = netmod.calibration_loss_and_gradients(model, batch)
    return {
        idx: grads[idx] for idx in _factored_layers(model) if isinstance(grads[idx], tuple)
    }


def hq_compress(
    network: netmod.NetworkSpec,
    factorizations: list[WhitenedFactorization],
    gradients: list[np.ndarray],
    batch: netmod.CalibrationBatch,
    target_ratio: float,
    eta: float,
):
    """Half-prune + quantize: truncate at twice the target maintenance ratio,
    then quantize rows by ascending predicted loss until the byte budget of
    the target ratio is met. Only meaningful below 0.5 maintenance, where the
    doubled truncation stage still removes parameters."""
    if not 0.0 < target_ratio < 0.5:
        raise RemapError(f"hybrid half-prune mode requires ratio < 0.5, got {target_ratio}")
    total_params = sum(f.b.shape[0] * f.b.shape[1] for f in factorizations)
    c_target = int(
        math.ceil((1.0 - target_ratio) * BYTES_PER_FP_PARAM * total_params - 1e-9)
    )
    pi_stage = max(0.0, 1.0 - 2.0 * target_ratio)
    plan = allocate(factorizations, gradients, pi_stage, eta, byte_target=c_target)
    compressed = materialize(plan, factorizations, network)
    budget = RemapBudget.from_ratio(total_params, target_ratio, plan.removed_params)
    row_grads = factor_row_gradients(compressed, batch)
    hybrid, ledgers, chosen = apply_remap(compressed, row_grads, budget, selection="loss")
    return hybrid, plan, ledgers, chosen
