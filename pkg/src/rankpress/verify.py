"""The `verify` battery: run every brute-force oracle against the fast paths
on seeded toy instances and report one line per check.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from . import linalg, net as netmod, oracles, pipeline
from .allocate import allocate
from .curvature import accumulate_statistics, finalize, kl_hessian
from .oracles import OracleReport, ScanLayer
from .remap import RemapBudget, RowCandidate, select_rows
from .whiten import whiten

SMALL_DIMS = (10, 8, 8)  # head is the last dim; vocab 8
SMALL_TOKENS = 12


def _rel(err: float, ref: float) -> float:
    return err / max(ref, 1e-300)


def _small_problem(seed: int):
    network = pipeline.generate_model(seed, SMALL_DIMS)
    batch = pipeline.generate_calibration(seed, network, SMALL_TOKENS)
    return network, batch


def check_svd_reconstruction(seed: int) -> OracleReport:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in ((8, 5), (5, 8), (6, 6)):
        m = rng.standard_normal(shape)
        res = linalg.svd(m)
        worst = max(worst, _rel(np.linalg.norm(res.reconstruct() - m), np.linalg.norm(m)))
        k = min(shape)
        worst = max(worst, float(np.max(np.abs(res.u.T @ res.u - np.eye(k)))))
        worst = max(worst, float(np.max(np.abs(res.v.T @ res.v - np.eye(k)))))
    return OracleReport("svd_reconstruction", worst, 1e-8)


def check_psd_roots(seed: int) -> OracleReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((12, 6))
    s = x.T @ x / 12.0
    lam = 1e-3
    root = linalg.psd_sqrt(s, lam)
    inv = linalg.psd_inv_sqrt(s, lam)
    target = s + lam * np.eye(6)
    worst = _rel(np.linalg.norm(root @ root - target), np.linalg.norm(target))
    worst = max(worst, float(np.max(np.abs(inv @ target @ inv - np.eye(6)))))
    worst = max(worst, float(np.max(np.abs(root @ inv - np.eye(6)))))
    return OracleReport("psd_square_roots", worst, 1e-6)


def check_weight_gradients(seed: int) -> OracleReport:
    network, batch = _small_problem(seed)
    _, grads = netmod.calibration_loss_and_gradients(network, batch)
    worst = 0.0
    for layer in network.target_layers:
        fd = oracles.finite_diff_weight_gradient(network, batch, layer, 1e-5)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        worst = max(worst, float(np.max(np.abs(grads[layer] - fd))) / scale)
    return OracleReport("weight_gradient_vs_finite_difference", worst, 1e-4)


def check_curvature_exactness(seed: int) -> OracleReport:
    network, batch = _small_problem(seed)
    k = network.vocab_size
    stats = accumulate_statistics(network, batch, k)
    worst = 0.0
    for layer in network.target_layers:
        explicit = oracles.explicit_layer_curvature(network, batch, k, layer)
        err = np.linalg.norm(stats[layer].c - explicit)
        worst = max(worst, _rel(err, max(np.linalg.norm(explicit), 1e-12)))
    return OracleReport("curvature_vs_explicit_jacobian", worst, 1e-4)


def check_kl_quadratic(seed: int) -> OracleReport:
    rng = np.random.default_rng(seed)
    eps = 1e-3
    worst = 0.0
    tested = 0
    for _ in range(100):
        z = rng.standard_normal(16)
        p = netmod.softmax(z)
        delta = rng.standard_normal(16)
        delta /= np.linalg.norm(delta)
        quad = 0.5 * eps * eps * float(delta @ kl_hessian(p) @ delta)
        if quad <= 0.5 * eps * eps * 1e-6:
            continue
        tested += 1
        logq = netmod.log_softmax(z + eps * delta)
        kl = float(p @ (netmod.log_softmax(z) - logq))
        worst = max(worst, abs(kl / quad - 1.0))
    detail = f"{tested} directions above the curvature floor"
    return OracleReport("kl_second_order_ratio", worst, 0.02, detail)


def check_score_fidelity(seed: int) -> OracleReport:
    """First-order scores are only statistically accurate, so this check
    mirrors the acceptance shape: at least 90% of (seed, layer) cases must
    land within 15% of the measured loss change."""
    cases = 0
    within = 0
    for offset in range(6):
        network, batch = _small_problem(seed + 100 * offset)
        stats = accumulate_statistics(network, batch, network.vocab_size)
        for st in stats.values():
            finalize(st)
        _, grads = netmod.calibration_loss_and_gradients(network, batch)
        for layer in network.target_layers:
            fact = whiten(network.layers[layer].weight, stats[layer], layer=layer)
            g_tilde = stats[layer].c_inv_half @ grads[layer] @ stats[layer].r_inv_half
            i = len(fact.singular_values) - 1
            g = float(fact.svd.u[:, i] @ g_tilde @ fact.svd.v[:, i])
            predicted = -g * float(fact.singular_values[i])
            actual = oracles.drop_and_remeasure(network, batch, [fact], layer, i)
            cases += 1
            if abs(predicted - actual) / max(abs(predicted), 1e-8) <= 0.15:
                within += 1
    outside = 1.0 - within / cases
    return OracleReport(
        "component_score_vs_drop_and_remeasure",
        outside,
        0.10,
        f"{within}/{cases} cases within 15% of the measured change",
    )


def check_allocation_scan(seed: int) -> OracleReport:
    network, batch = _small_problem(seed)
    stats = accumulate_statistics(network, batch, network.vocab_size)
    for st in stats.values():
        finalize(st)
    _, grads = netmod.calibration_loss_and_gradients(network, batch)
    facts = [whiten(network.layers[i].weight, stats[i], layer=i) for i in network.target_layers]
    gradients = [grads[i] for i in network.target_layers]
    plan = allocate(facts, gradients, pi=0.4, eta=0.05)

    # The scan re-derives the greedy order from the same candidate scores;
    # score arithmetic itself is covered by the drop-and-remeasure check.
    scan_layers = [
        ScanLayer(layer=la.layer, m=la.m, n=la.n, scores=la.scores)
        for la in plan.layers
    ]
    sequence, ranks, removed = oracles.exhaustive_pool_scan(scan_layers, 0.4, 0.05)
    same = (
        sequence == plan.drop_history
        and ranks == plan.ranks
        and removed == plan.removed_params
    )
    return OracleReport(
        "allocation_vs_pool_scan",
        0.0 if same else 1.0,
        0.0,
        f"{len(sequence)} drops compared",
    )


def check_remap_selection(seed: int) -> OracleReport:
    rng = np.random.default_rng(seed)
    scores = rng.random(10)
    savings = rng.integers(5, 20, size=10)
    candidates = [
        RowCandidate(score=float(s), byte_saving=int(b), layer=0, factor="A", row_index=i)
        for i, (s, b) in enumerate(zip(scores, savings))
    ]
    budget = RemapBudget(c_target=int(sum(savings) // 2), c_svd=0)
    chosen = select_rows(candidates, budget)
    greedy_total = sum(c.score for c in chosen)

    best = math.inf
    for size in range(len(candidates) + 1):
        for combo in combinations(candidates, size):
            if sum(c.byte_saving for c in combo) >= budget.c_rem:
                best = min(best, sum(c.score for c in combo))
    ok = greedy_total <= 2.0 * best + 1e-12
    return OracleReport(
        "remap_greedy_vs_exhaustive",
        0.0 if ok else greedy_total / max(best, 1e-300),
        0.0,
        f"greedy {greedy_total:.6f} vs optimum {best:.6f}",
    )


def run_verification(seed: int = 0) -> list[OracleReport]:
    checks = (
        check_svd_reconstruction,
        check_psd_roots,
        check_weight_gradients,
        check_curvature_exactness,
        check_kl_quadratic,
        check_score_fidelity,
        check_allocation_scan,
        check_remap_selection,
    )
    return [check(seed) for check in checks]
