"""Experiment harness: generate toy models and calibration sets, run the
calibrate -> compress -> remap -> eval pipeline, and build reports.

All randomness flows from a single seed through one numpy Generator. Stage
wall-clock is logged to stderr only, so output files stay byte-identical
across reruns of the same configuration.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import fileio
from . import net as netmod
from .allocate import CompressionPlan, allocate, materialize
from .curvature import LayerStats, accumulate_statistics, finalize, resolve_damping
from .remap import (
    BYTES_PER_FP_PARAM,
    RemapBudget,
    apply_remap,
    factor_row_gradients,
)
from .whiten import MODE_DOUBLE, WHITENING_MODES, whiten_with_mode

DEFAULT_DIMS = (48, 32, 32, 24)
DEFAULT_TOKENS = 256
HEAD_GAIN = 3.0
SPECTRAL_CONDITION = 300.0  # sigma_max / sigma_min of generated weights

# --fit generator: deterministic heavy-ball descent on the calibration loss
FIT_COPIES = 4
FIT_LR = 0.5
FIT_MOMENTUM = 0.9
FIT_GRAD_TOL = 0.03
FIT_MAX_STEPS = 400

REMAP_MODES = ("off", "plain", "loss", "hq")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ratio: float = 0.6  # maintenance ratio: fraction of parameters kept
    eta: float = 0.05
    top_k: int | None = None  # None -> min(32, vocab)
    damping_r: float | None = None  # None -> relative default
    damping_c: float | None = None
    whitening: str = MODE_DOUBLE
    remap: str = "off"
    dims: tuple[int, ...] = DEFAULT_DIMS
    tokens: int = DEFAULT_TOKENS
    fit: bool = False  # gen only: descend to a calibration-loss optimum

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"maintenance ratio {self.ratio} outside (0, 1)")
        if self.whitening not in WHITENING_MODES:
            raise ConfigError(f"whitening must be one of {WHITENING_MODES}")
        if self.remap not in REMAP_MODES:
            raise ConfigError(f"remap must be one of {REMAP_MODES}")
        if self.remap == "hq" and self.ratio >= 0.5:
            raise ConfigError("hq remapping requires maintenance ratio < 0.5")
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ConfigError(f"bad layer dims {self.dims}")
        if self.tokens < 1:
            raise ConfigError("need at least one calibration token")

    @property
    def pruning_ratio(self) -> float:
        return 1.0 - self.ratio

    def resolve_top_k(self, vocab: int) -> int:
        k = min(32, vocab) if self.top_k is None else self.top_k
        if not 1 <= k <= vocab:
            raise ConfigError(f"top-k {k} out of range for vocab {vocab}")
        return k


def merge_config(defaults: RunConfig, file_values: dict, cli_values: dict) -> RunConfig:
    """CLI flags override config-file values override defaults."""
    merged = {}
    for source in (file_values, cli_values):
        for key, value in source.items():
            if value is None:
                continue
            if not hasattr(defaults, key):
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = tuple(value) if key == "dims" else value
    return replace(defaults, **merged)


def _log(stage: str, t0: float) -> None:
    print(f"[rankpress] {stage}: {time.perf_counter() - t0:.3f}s", file=sys.stderr)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _decayed_weight(rng: np.random.Generator, fan_out: int, fan_in: int, gain: float) -> np.ndarray:
    """Random orthogonal factors around a geometrically decaying spectrum.

    Trained weight matrices have decaying singular values; a flat i.i.d.
    spectrum would make every toy layer equally incompressible and break the
    first-order score regime the allocator relies on. The Frobenius norm is
    set so that the output variance matches a gain/sqrt(fan_in) init.
    """
    k = min(fan_out, fan_in)
    u = np.linalg.qr(rng.standard_normal((fan_out, k)))[0]
    v = np.linalg.qr(rng.standard_normal((fan_in, k)))[0]
    if k > 1:
        spectrum = SPECTRAL_CONDITION ** (-np.arange(k) / (k - 1))
    else:
        spectrum = np.ones(1)
    w = (u * spectrum) @ v.T
    return w * (gain * math.sqrt(fan_out) / float(np.linalg.norm(w)))


def generate_model(seed: int, dims: tuple[int, ...]) -> netmod.NetworkSpec:
    """Random tanh network over the dim chain, logit head scaled for a
    well-spread softmax. Deterministic in the seed."""
    rng = np.random.default_rng(seed)
    layers: list[netmod.LayerDef] = []
    targets: list[int] = []
    n_linear = len(dims) - 1
    for i in range(n_linear):
        fan_in, fan_out = dims[i], dims[i + 1]
        gain = HEAD_GAIN if i == n_linear - 1 else 1.0
        w = _decayed_weight(rng, fan_out, fan_in, gain)
        b = 0.1 * rng.standard_normal(fan_out)
        targets.append(len(layers))
        layers.append(netmod.LayerDef.linear(w, bias=b))
        if i != n_linear - 1:
            layers.append(netmod.LayerDef.act("tanh"))
    return netmod.NetworkSpec(
        layers=layers, input_dim=dims[0], vocab_size=dims[-1], target_layers=targets
    )


def generate_calibration(
    seed: int, network: netmod.NetworkSpec, tokens: int
) -> netmod.CalibrationBatch:
    """Gaussian inputs; targets follow the model's own predictive distribution
    via a deterministic low-discrepancy assignment (each token takes the label
    with the largest accumulated probability deficit), which keeps the
    empirical label histogram close to the model's marginals without
    sampling noise."""
    rng = np.random.default_rng(seed + 1)
    inputs = rng.standard_normal((tokens, network.input_dim))
    deficit = np.zeros(network.vocab_size)
    targets = np.empty(tokens, dtype=np.int64)
    for t in range(tokens):
        logits, _, _ = netmod.forward(network, inputs[t])
        deficit += netmod.softmax(logits)
        y = int(np.argmax(deficit))
        targets[t] = y
        deficit[y] -= 1.0
    return netmod.CalibrationBatch(inputs=inputs, targets=targets)


def generate_fitted(seed: int, dims: tuple[int, ...], tokens: int):
    """Toy model descended to (near) a calibration-loss optimum.

    Compression in practice targets trained weights, where the calibration
    gradient is small and perturbation damage is curvature-dominated; the raw
    random toy instead sits in a gradient-dominated regime. Each distinct
    input is repeated with the init model's top few classes as labels, so the
    optimum is a spread distribution (entropy ~ ln copies) rather than an
    interpolating one-hot, and full-batch heavy-ball descent runs until the
    largest weight-gradient entry falls below a fixed tolerance. Everything
    is deterministic in the seed.
    """
    network = generate_model(seed, dims)
    rng = np.random.default_rng(seed + 1)
    distinct = max(1, tokens // FIT_COPIES)
    copies = tokens // distinct
    base = rng.standard_normal((distinct, network.input_dim))
    inputs = np.repeat(base, copies, axis=0)[:tokens]
    targets = np.empty(len(inputs), dtype=np.int64)
    for k in range(distinct):
        logits, _, _ = netmod.forward(network, base[k])
        order = np.argsort(-logits, kind="stable")
        take = min(copies, len(inputs) - k * copies)
        targets[k * copies : k * copies + take] = order[:take]
    batch = netmod.CalibrationBatch(inputs=inputs, targets=targets)

    velocity = {i: np.zeros_like(network.layers[i].weight) for i in network.target_layers}
    for _ in range(FIT_MAX_STEPS):
        _, grads = netmod.calibration_loss_and_gradients(network, batch)
        if max(float(np.max(np.abs(grads[i]))) for i in network.target_layers) <= FIT_GRAD_TOL:
            break
        for i in network.target_layers:
            velocity[i] = FIT_MOMENTUM * velocity[i] + grads[i]
            network.layers[i].weight -= FIT_LR * velocity[i]
    return network, batch


def cmd_gen(config: RunConfig, model_path: Path, calib_path: Path) -> None:
    t0 = time.perf_counter()
    if config.fit:
        network, batch = generate_fitted(config.seed, config.dims, config.tokens)
    else:
        network = generate_model(config.seed, config.dims)
        batch = generate_calibration(config.seed, network, config.tokens)
    fileio.save_model(model_path, network)
    fileio.save_calibration(calib_path, batch)
    _log("gen", t0)


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def calibrate(
    network: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    top_k: int,
    damping_r: float | None,
    damping_c: float | None,
) -> dict[int, LayerStats]:
    stats = accumulate_statistics(network, batch, top_k)
    for st in stats.values():
        finalize(st, damping_r, damping_c)
    return stats


def cmd_calibrate(
    config: RunConfig, model_path: Path, calib_path: Path, stats_path: Path
) -> None:
    t0 = time.perf_counter()
    network = fileio.load_model(model_path)
    batch = fileio.load_calibration(calib_path)
    k = config.resolve_top_k(network.vocab_size)
    stats = calibrate(network, batch, k, config.damping_r, config.damping_c)
    fileio.save_stats(stats_path, stats, k)
    _log("calibrate", t0)


# ---------------------------------------------------------------------------
# compress
# ---------------------------------------------------------------------------


def _finalized_stats(stats: dict[int, LayerStats]) -> dict[int, LayerStats]:
    for st in stats.values():
        if not st.finalized:
            finalize(st, st.lambda_r, st.lambda_c)
    return stats


def build_factorizations(network, stats, mode):
    facts = []
    for idx in network.target_layers:
        st = stats.get(idx) if stats else None
        facts.append(whiten_with_mode(network.layers[idx].weight, st, mode, layer=idx))
    return facts


def compress(
    network: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    stats: dict[int, LayerStats] | None,
    config: RunConfig,
):
    """Whiten, score, allocate, materialize. For the quantizing remap modes the
    truncation stage runs at twice the maintenance ratio (capped below one)
    and keeps dropping until the remaining byte budget is coverable by int8
    rows; remapping then closes the gap to the byte budget."""
    if config.whitening != "none":
        stats = _finalized_stats(stats)
    facts = build_factorizations(network, stats, config.whitening)
    _, grads = netmod.calibration_loss_and_gradients(network, batch)
    gradients = [grads[f.layer] for f in facts]

    total_params = sum(f.b.shape[0] * f.b.shape[1] for f in facts)
    if config.remap == "off":
        pi, byte_target = config.pruning_ratio, None
    else:
        pi = max(0.0, 1.0 - 2.0 * config.ratio)
        byte_target = int(
            math.ceil(config.pruning_ratio * BYTES_PER_FP_PARAM * total_params - 1e-9)
        )
    plan = allocate(facts, gradients, pi, config.eta, byte_target=byte_target)
    compressed = materialize(plan, facts, network)
    return plan, compressed, facts


def cmd_compress(
    config: RunConfig,
    model_path: Path,
    calib_path: Path,
    stats_path: Path | None,
    out_model: Path,
    out_plan: Path,
    plan_path: Path | None = None,
) -> CompressionPlan:
    t0 = time.perf_counter()
    network = fileio.load_model(model_path)
    batch = fileio.load_calibration(calib_path)
    stats = None
    if config.whitening != "none":
        if stats_path is None:
            raise ConfigError("whitening requires a statistics file (run calibrate)")
        stats, _ = fileio.load_stats(stats_path)
    if plan_path is not None:
        plan = fileio.load_plan(plan_path)
        facts = build_factorizations(
            network, _finalized_stats(stats) if stats else None, config.whitening
        )
        compressed = materialize(plan, facts, network)
    else:
        plan, compressed, _ = compress(network, batch, stats, config)
    fileio.save_model(out_model, compressed)
    fileio.save_plan(out_plan, plan)
    _log("compress", t0)
    return plan


# ---------------------------------------------------------------------------
# remap
# ---------------------------------------------------------------------------


def cmd_remap(
    config: RunConfig,
    compressed_path: Path,
    calib_path: Path,
    plan_path: Path,
    out_path: Path,
) -> None:
    t0 = time.perf_counter()
    if config.remap == "off":
        raise ConfigError("remap mode is 'off'; nothing to do")
    model = fileio.load_model(compressed_path)
    batch = fileio.load_calibration(calib_path)
    plan = fileio.load_plan(plan_path)
    total_params = sum(la.m * la.n for la in plan.layers)
    budget = RemapBudget.from_ratio(total_params, config.ratio, plan.removed_params)
    row_grads = factor_row_gradients(model, batch)
    selection = "plain" if config.remap == "plain" else "loss"
    hybrid, ledgers, _ = apply_remap(model, row_grads, budget, selection=selection)
    fileio.save_hybrid(out_path, hybrid, ledgers)
    _log("remap", t0)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def mean_kl_to_original(
    original: netmod.NetworkSpec,
    compressed: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
) -> float:
    """Exact mean token KL(p_original || p_compressed) over the full vocabulary."""
    total = 0.0
    for t in range(len(batch)):
        z_a, _, _ = netmod.forward(original, batch.inputs[t])
        z_b, _, _ = netmod.forward(compressed, batch.inputs[t])
        logp = netmod.log_softmax(z_a)
        logq = netmod.log_softmax(z_b)
        p = np.exp(logp)
        total += float(p @ (logp - logq))
    return total / len(batch)


def _model_byte_counts(path: Path) -> dict[int, int]:
    """Byte ledger per target layer at the 2-bytes-per-parameter baseline for
    plain model files, or the exact hybrid ledger for hybrid files."""
    try:
        header, _ = fileio.read_blob(path, "hybrid")
        return fileio.hybrid_section_sizes(path)
    except fileio.FileFormatError:
        pass
    header, _ = fileio.read_blob(path, "model")
    out = {}
    for i in header["target_layers"]:
        lh = header["layers"][i]
        if lh["kind"] == "lowrank":
            out[i] = 2 * lh["rank"] * (lh["rows"] + lh["cols"])
        else:
            out[i] = 2 * lh["rows"] * lh["cols"]
    return out


def load_any_model(path: Path) -> netmod.NetworkSpec:
    try:
        return fileio.load_hybrid(path)
    except fileio.FileFormatError:
        return fileio.load_model(path)


def build_report(
    original: netmod.NetworkSpec,
    compressed: netmod.NetworkSpec,
    batch: netmod.CalibrationBatch,
    byte_counts: dict[int, int],
    plan: CompressionPlan | None,
) -> dict:
    per_layer = []
    params_before = 0
    params_after = 0
    for idx in original.target_layers:
        w = original.layers[idx].weight
        m, n = w.shape
        comp = compressed.layers[idx]
        if comp.kind == "lowrank":
            stored = comp.rank * (m + n)
            rank = comp.rank
            err = float(np.linalg.norm(comp.dense_weight() - w))
        else:
            stored = m * n
            rank = min(m, n)
            err = float(np.linalg.norm(comp.dense_weight() - w))
        params_before += m * n
        params_after += stored
        per_layer.append(
            {
                "layer": idx,
                "rows": m,
                "cols": n,
                "rank": rank,
                "dense": comp.kind != "lowrank",
                "stored_params": stored,
                "bytes": byte_counts.get(idx),
                "weight_error_fro": err,
            }
        )
    report = {
        "kind": "report",
        "params_before": params_before,
        "params_after": params_after,
        "bytes_before": BYTES_PER_FP_PARAM * params_before,
        "bytes_after": sum(b for b in byte_counts.values()),
        "per_layer": per_layer,
        "calibration_loss_before": netmod.calibration_loss(original, batch),
        "calibration_loss_after": netmod.calibration_loss(compressed, batch),
        "kl_to_original": mean_kl_to_original(original, compressed, batch),
    }
    if plan is not None:
        drops_per_layer: dict[str, int] = {}
        for layer, _ in plan.drop_history:
            drops_per_layer[str(layer)] = drops_per_layer.get(str(layer), 0) + 1
        report["drop_history"] = {
            "total_drops": len(plan.drop_history),
            "per_layer": drops_per_layer,
            "removed_params": plan.removed_params,
            "target_removed": plan.target_removed,
            "budget_unreachable": plan.budget_unreachable,
        }
    return report


def cmd_eval(
    config: RunConfig,
    original_path: Path,
    model_path: Path,
    calib_path: Path,
    out_path: Path,
    plan_path: Path | None = None,
) -> dict:
    t0 = time.perf_counter()
    original = fileio.load_model(original_path)
    compressed = load_any_model(model_path)
    batch = fileio.load_calibration(calib_path)
    plan = fileio.load_plan(plan_path) if plan_path else None
    report = build_report(
        original, compressed, batch, _model_byte_counts(model_path), plan
    )
    out_path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    _log("eval", t0)
    return report


# ---------------------------------------------------------------------------
# sweep over the curvature top-K
# ---------------------------------------------------------------------------


def cmd_sweep_k(
    config: RunConfig,
    model_path: Path,
    calib_path: Path,
    k_values: list[int],
    out_path: Path,
) -> list[tuple[int, float]]:
    t0 = time.perf_counter()
    network = fileio.load_model(model_path)
    batch = fileio.load_calibration(calib_path)
    rows: list[tuple[int, float]] = []
    for k in k_values:
        if not 1 <= k <= network.vocab_size:
            raise ConfigError(f"top-k {k} out of range for vocab {network.vocab_size}")
        stats = calibrate(network, batch, k, config.damping_r, config.damping_c)
        cfg = replace(config, top_k=k)
        _, compressed, _ = compress(network, batch, stats, cfg)
        rows.append((k, mean_kl_to_original(network, compressed, batch)))
    best = min(kl for _, kl in rows)
    lines = ["top_k,kl_to_original,normalized"]
    for k, kl in rows:
        norm = kl / best if best > 0 else 1.0
        lines.append(f"{k},{kl!r},{norm!r}")
    out_path.write_text("\n".join(lines) + "\n")
    _log("sweep-k", t0)
    return rows
