"""On-disk formats.

Every binary file is a single line of compact JSON (the header) followed by a
raw little-endian payload. Model and calibration payloads are float32;
statistics are float64 to keep the downstream factorizations reproducible;
hybrid model sections mix float16, int8, float32 scales and uint32 row
indices so that each layer's section length equals its byte ledger exactly.

All writers emit deterministic bytes for identical inputs: JSON keys are
sorted, and payload order is fixed by the header.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import net as netmod
from .allocate import CompressionPlan, LayerAllocation
from .curvature import LayerStats
from .remap import HybridLayer, QuantizedRow

FORMAT_VERSION = 1

F32 = np.dtype("<f4")
F64 = np.dtype("<f8")
F16 = np.dtype("<f2")
U32 = np.dtype("<u4")
I8 = np.dtype("|i1")


class FileFormatError(ValueError):
    pass


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def write_blob(path: str | Path, header: dict, payload: bytes = b"") -> None:
    Path(path).write_bytes(_dump_header(header) + payload)


def read_blob(path: str | Path, expected_kind: str):
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FileFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: bad header: {exc}") from exc
    if header.get("kind") != expected_kind:
        raise FileFormatError(
            f"{path}: expected a {expected_kind!r} file, got {header.get('kind')!r}"
        )
    return header, raw[newline + 1 :]


class _Reader:
    def __init__(self, payload: bytes, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, dtype: np.dtype, count: int) -> np.ndarray:
        nbytes = dtype.itemsize * count
        if self.offset + nbytes > len(self.payload):
            raise FileFormatError(f"{self.path}: payload truncated")
        out = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset)
        self.offset += nbytes
        return out.copy()

    def done(self) -> None:
        if self.offset != len(self.payload):
            raise FileFormatError(
                f"{self.path}: {len(self.payload) - self.offset} trailing payload bytes"
            )


# ---------------------------------------------------------------------------
# model files (dense or compressed): float32 weights then biases in layer order
# ---------------------------------------------------------------------------


def _layer_header(layer: netmod.LayerDef) -> dict:
    if layer.kind == "linear":
        m, n = layer.weight.shape
        return {"kind": "linear", "rows": m, "cols": n, "has_bias": layer.bias is not None}
    if layer.kind == "lowrank":
        return {
            "kind": "lowrank",
            "rows": layer.a_factor.shape[0],
            "cols": layer.d_factor.shape[0],
            "rank": layer.rank,
            "has_bias": layer.bias is not None,
        }
    return {"kind": "activation", "activation": layer.activation}


def save_model(path: str | Path, network: netmod.NetworkSpec) -> None:
    header = {
        "kind": "model",
        "format": FORMAT_VERSION,
        "input_dim": network.input_dim,
        "vocab_size": network.vocab_size,
        "target_layers": list(network.target_layers),
        "layers": [_layer_header(l) for l in network.layers],
    }
    chunks: list[bytes] = []
    for layer in network.layers:
        if layer.kind == "linear":
            chunks.append(np.ascontiguousarray(layer.weight, dtype=F32).tobytes())
        elif layer.kind == "lowrank":
            chunks.append(np.ascontiguousarray(layer.a_factor, dtype=F32).tobytes())
            chunks.append(np.ascontiguousarray(layer.d_factor, dtype=F32).tobytes())
    for layer in network.layers:
        if layer.bias is not None:
            chunks.append(np.ascontiguousarray(layer.bias, dtype=F32).tobytes())
    write_blob(path, header, b"".join(chunks))


def load_model(path: str | Path) -> netmod.NetworkSpec:
    header, payload = read_blob(path, "model")
    reader = _Reader(payload, path)
    layers: list[netmod.LayerDef] = []
    for lh in header["layers"]:
        if lh["kind"] == "linear":
            w = reader.take(F32, lh["rows"] * lh["cols"]).astype(np.float64)
            layers.append(netmod.LayerDef.linear(w.reshape(lh["rows"], lh["cols"])))
        elif lh["kind"] == "lowrank":
            a = reader.take(F32, lh["rows"] * lh["rank"]).astype(np.float64)
            d = reader.take(F32, lh["cols"] * lh["rank"]).astype(np.float64)
            layers.append(
                netmod.LayerDef.lowrank(
                    a.reshape(lh["rows"], lh["rank"]), d.reshape(lh["cols"], lh["rank"])
                )
            )
        elif lh["kind"] == "activation":
            layers.append(netmod.LayerDef.act(lh["activation"]))
        else:
            raise FileFormatError(f"{path}: unknown layer kind {lh['kind']!r}")
    for i, lh in enumerate(header["layers"]):
        if lh.get("has_bias"):
            dim = lh["rows"]
            layers[i].bias = reader.take(F32, dim).astype(np.float64)
    reader.done()
    return netmod.NetworkSpec(
        layers=layers,
        input_dim=header["input_dim"],
        vocab_size=header["vocab_size"],
        target_layers=list(header["target_layers"]),
    )


# ---------------------------------------------------------------------------
# calibration files: float32 inputs then uint32 target indices
# ---------------------------------------------------------------------------


def save_calibration(path: str | Path, batch: netmod.CalibrationBatch) -> None:
    header = {
        "kind": "calibration",
        "format": FORMAT_VERSION,
        "tokens": int(batch.inputs.shape[0]),
        "input_dim": int(batch.inputs.shape[1]),
    }
    payload = (
        np.ascontiguousarray(batch.inputs, dtype=F32).tobytes()
        + np.ascontiguousarray(batch.targets, dtype=U32).tobytes()
    )
    write_blob(path, header, payload)


def load_calibration(path: str | Path) -> netmod.CalibrationBatch:
    header, payload = read_blob(path, "calibration")
    n, d = header["tokens"], header["input_dim"]
    if n <= 0:
        raise FileFormatError(f"{path}: empty calibration set")
    reader = _Reader(payload, path)
    inputs = reader.take(F32, n * d).astype(np.float64).reshape(n, d)
    targets = reader.take(U32, n).astype(np.int64)
    reader.done()
    return netmod.CalibrationBatch(inputs=inputs, targets=targets)


# ---------------------------------------------------------------------------
# statistics files: float64 R then C per layer
# ---------------------------------------------------------------------------


def save_stats(path: str | Path, stats: dict[int, LayerStats], top_k: int) -> None:
    entries = []
    chunks = []
    for idx in sorted(stats):
        st = stats[idx]
        if st.lambda_r is None or st.lambda_c is None:
            raise FileFormatError(f"layer {idx}: damping unresolved; finalize first")
        entries.append(
            {
                "layer": st.layer,
                "input_dim": st.input_dim,
                "output_dim": st.output_dim,
                "token_count": st.token_count,
                "lambda_r": st.lambda_r,
                "lambda_c": st.lambda_c,
            }
        )
        chunks.append(np.ascontiguousarray(st.r, dtype=F64).tobytes())
        chunks.append(np.ascontiguousarray(st.c, dtype=F64).tobytes())
    header = {
        "kind": "stats",
        "format": FORMAT_VERSION,
        "top_k": top_k,
        "layers": entries,
    }
    write_blob(path, header, b"".join(chunks))


def load_stats(path: str | Path):
    """Returns ``(stats_by_layer, top_k)``; square roots are not recomputed
    here, callers finalize with the stored damping."""
    header, payload = read_blob(path, "stats")
    reader = _Reader(payload, path)
    out: dict[int, LayerStats] = {}
    for entry in header["layers"]:
        st = LayerStats(
            layer=entry["layer"],
            input_dim=entry["input_dim"],
            output_dim=entry["output_dim"],
        )
        n, m = entry["input_dim"], entry["output_dim"]
        st.r = reader.take(F64, n * n).reshape(n, n)
        st.c = reader.take(F64, m * m).reshape(m, m)
        st.r_tokens = entry["token_count"]
        st.c_tokens = entry["token_count"]
        st.lambda_r = entry["lambda_r"]
        st.lambda_c = entry["lambda_c"]
        out[st.layer] = st
    reader.done()
    return out, header["top_k"]


# ---------------------------------------------------------------------------
# plan files: plain JSON
# ---------------------------------------------------------------------------


def save_plan(path: str | Path, plan: CompressionPlan) -> None:
    doc = {
        "kind": "plan",
        "format": FORMAT_VERSION,
        "pruning_ratio": plan.pruning_ratio,
        "min_rank_ratio": plan.min_rank_ratio,
        "target_removed": plan.target_removed,
        "removed_params": plan.removed_params,
        "byte_target": plan.byte_target,
        "budget_unreachable": plan.budget_unreachable,
        "drop_history": [[layer, score] for layer, score in plan.drop_history],
        "layers": [
            {
                "layer": la.layer,
                "rows": la.m,
                "cols": la.n,
                "threshold_rank": la.r_star,
                "min_rank": la.r_min,
                "final_rank": la.rank,
                "dense": la.rank > la.r_star,
                "scores": [float(s) for s in la.scores],
            }
            for la in plan.layers
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_plan(path: str | Path) -> CompressionPlan:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "plan":
        raise FileFormatError(f"{path}: not a plan file")
    layers = [
        LayerAllocation(
            layer=e["layer"],
            m=e["rows"],
            n=e["cols"],
            r_max=min(e["rows"], e["cols"]),
            r_star=e["threshold_rank"],
            r_min=e["min_rank"],
            scores=np.asarray(e["scores"], dtype=np.float64),
            rank=e["final_rank"],
        )
        for e in doc["layers"]
    ]
    return CompressionPlan(
        layers=layers,
        drop_history=[(int(l), float(s)) for l, s in doc["drop_history"]],
        removed_params=doc["removed_params"],
        target_removed=doc["target_removed"],
        pruning_ratio=doc["pruning_ratio"],
        min_rank_ratio=doc["min_rank_ratio"],
        byte_target=doc["byte_target"],
        budget_unreachable=doc["budget_unreachable"],
    )


# ---------------------------------------------------------------------------
# hybrid model files
# ---------------------------------------------------------------------------
#
# Payload layout, in header order:
#   per target layer, one *section* whose length equals the layer byte ledger:
#     factored layer, for factor A then D:
#       float16 values of fp rows (ascending row index)
#       int8 codes of quantized rows (ascending row index)
#       float32 scales (ascending row index)
#       uint32 row indices (ascending)
#     dense-fallback layer: the float16 weight matrix
#   trailer (outside the ledger): float32 weights of non-target linear layers
#   in layer order, then float32 biases in layer order.


def _split_rows(mat: np.ndarray, quantized: list[QuantizedRow]):
    q_by_row = {q.row_index: q for q in quantized}
    fp_rows = [i for i in range(mat.shape[0]) if i not in q_by_row]
    q_rows = sorted(q_by_row)
    return fp_rows, q_rows, q_by_row


def _factor_section(mat: np.ndarray, quantized: list[QuantizedRow]) -> bytes:
    fp_rows, q_rows, q_by_row = _split_rows(mat, quantized)
    parts = [np.ascontiguousarray(mat[fp_rows], dtype=F16).tobytes()]
    parts.append(b"".join(np.ascontiguousarray(q_by_row[i].codes, dtype=I8).tobytes() for i in q_rows))
    parts.append(np.asarray([q_by_row[i].scale for i in q_rows], dtype=F32).tobytes())
    parts.append(np.asarray(q_rows, dtype=U32).tobytes())
    return b"".join(parts)


def save_hybrid(
    path: str | Path,
    network: netmod.NetworkSpec,
    ledgers: list[HybridLayer],
) -> None:
    """The stored fp rows are rounded to float16; loading therefore yields the
    model as served, not the float64 in-memory factors."""
    by_layer = {l.layer: l for l in ledgers}
    layer_headers = []
    sections: list[bytes] = []
    for i, layer in enumerate(network.layers):
        lh = _layer_header(layer)
        if i in network.target_layers:
            if layer.kind == "lowrank":
                ledger = by_layer[i]
                quant = {"A": [], "D": []}
                for q in ledger.quantized_rows:
                    quant[q.factor].append(q.row_index)
                section = _factor_section(
                    layer.a_factor, [q for q in ledger.quantized_rows if q.factor == "A"]
                ) + _factor_section(
                    layer.d_factor, [q for q in ledger.quantized_rows if q.factor == "D"]
                )
                lh["quantized_rows"] = {k: sorted(v) for k, v in quant.items()}
                lh["byte_count"] = ledger.byte_count
            else:
                section = np.ascontiguousarray(layer.weight, dtype=F16).tobytes()
                lh["byte_count"] = 2 * layer.weight.size
            if len(section) != lh["byte_count"]:
                raise FileFormatError(
                    f"layer {i}: section is {len(section)} bytes, ledger says "
                    f"{lh['byte_count']}"
                )
            sections.append(section)
        layer_headers.append(lh)

    trailer: list[bytes] = []
    for i, layer in enumerate(network.layers):
        if layer.kind == "linear" and i not in network.target_layers:
            trailer.append(np.ascontiguousarray(layer.weight, dtype=F32).tobytes())
    for layer in network.layers:
        if layer.bias is not None:
            trailer.append(np.ascontiguousarray(layer.bias, dtype=F32).tobytes())

    header = {
        "kind": "hybrid",
        "format": FORMAT_VERSION,
        "input_dim": network.input_dim,
        "vocab_size": network.vocab_size,
        "target_layers": list(network.target_layers),
        "layers": layer_headers,
    }
    write_blob(path, header, b"".join(sections) + b"".join(trailer))


def hybrid_section_sizes(path: str | Path) -> dict[int, int]:
    """Actual byte span of each target-layer section in the file, for checking
    the ledger against reality."""
    header, _ = read_blob(path, "hybrid")
    return {
        i: lh["byte_count"]
        for i, lh in enumerate(header["layers"])
        if "byte_count" in lh
    }


def load_hybrid(path: str | Path) -> netmod.NetworkSpec:
    header, payload = read_blob(path, "hybrid")
    reader = _Reader(payload, path)
    targets = set(header["target_layers"])
    layers: list[netmod.LayerDef] = []
    for i, lh in enumerate(header["layers"]):
        if lh["kind"] == "activation":
            layers.append(netmod.LayerDef.act(lh["activation"]))
            continue
        if i not in targets:
            layers.append(netmod.LayerDef(kind="linear", weight=None))
            continue
        if lh["kind"] == "linear":
            w = reader.take(F16, lh["rows"] * lh["cols"]).astype(np.float64)
            layers.append(netmod.LayerDef.linear(w.reshape(lh["rows"], lh["cols"])))
            continue
        rank = lh["rank"]
        mats = []
        for name, rows in (("A", lh["rows"]), ("D", lh["cols"])):
            q_rows = lh["quantized_rows"][name]
            fp_rows = [r for r in range(rows) if r not in set(q_rows)]
            mat = np.zeros((rows, rank))
            fp_vals = reader.take(F16, len(fp_rows) * rank).astype(np.float64)
            if fp_rows:
                mat[fp_rows] = fp_vals.reshape(len(fp_rows), rank)
            codes = reader.take(I8, len(q_rows) * rank).astype(np.float64)
            scales = reader.take(F32, len(q_rows)).astype(np.float64)
            indices = reader.take(U32, len(q_rows)).astype(np.int64)
            if list(indices) != list(q_rows):
                raise FileFormatError(f"{path}: row index table mismatch in layer {i}")
            if q_rows:
                mat[indices] = codes.reshape(len(q_rows), rank) * scales[:, None]
            mats.append(mat)
        layers.append(netmod.LayerDef.lowrank(mats[0], mats[1]))
    for i, lh in enumerate(header["layers"]):
        if lh["kind"] == "linear" and i not in targets:
            w = reader.take(F32, lh["rows"] * lh["cols"]).astype(np.float64)
            layers[i] = netmod.LayerDef.linear(w.reshape(lh["rows"], lh["cols"]))
    for i, lh in enumerate(header["layers"]):
        if lh.get("has_bias"):
            layers[i].bias = reader.take(F32, lh["rows"]).astype(np.float64)
    reader.done()
    return netmod.NetworkSpec(
        layers=layers,
        input_dim=header["input_dim"],
        vocab_size=header["vocab_size"],
        target_layers=list(header["target_layers"]),
    )
