"""A restricted sequential network: linear layers (dense or low-rank factored),
elementwise activations, and a final logit head.

Forward passes, calibration cross-entropy, exact reverse-mode weight
gradients, and vector-Jacobian products from the logits to any intermediate
layer output are all implemented directly; tokens are processed one at a time
in a fixed order so every quantity is bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import check_finite


class NetError(ValueError):
    """Malformed network, batch, or evaluation request."""


# ---------------------------------------------------------------------------
# activations: value and derivative as a function of the layer input
# ---------------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner


ACTIVATIONS = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    # subgradient at 0 is defined as 0 for determinism
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0.0).astype(np.float64)),
    "gelu": (_gelu, _gelu_grad),
}


@dataclass
class LayerDef:
    """One layer: ``linear`` (dense weight), ``lowrank`` (factored A D^T), or
    ``activation``. Linear-like layers may carry a bias."""

    kind: str
    weight: np.ndarray | None = None
    a_factor: np.ndarray | None = None
    d_factor: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str | None = None

    @staticmethod
    def linear(weight: np.ndarray, bias: np.ndarray | None = None) -> "LayerDef":
        return LayerDef(kind="linear", weight=check_finite(weight, "weight"), bias=bias)

    @staticmethod
    def lowrank(a: np.ndarray, d: np.ndarray, bias: np.ndarray | None = None) -> "LayerDef":
        return LayerDef(
            kind="lowrank",
            a_factor=check_finite(a, "A factor"),
            d_factor=check_finite(d, "D factor"),
            bias=bias,
        )

    @staticmethod
    def act(name: str) -> "LayerDef":
        if name not in ACTIVATIONS:
            raise NetError(f"unknown activation {name!r}")
        return LayerDef(kind="activation", activation=name)

    @property
    def rank(self) -> int:
        if self.kind != "lowrank":
            raise NetError("rank is only defined for lowrank layers")
        return self.a_factor.shape[1]

    def out_dim(self, in_dim: int) -> int:
        if self.kind == "linear":
            return self.weight.shape[0]
        if self.kind == "lowrank":
            return self.a_factor.shape[0]
        return in_dim

    def in_dim(self) -> int | None:
        if self.kind == "linear":
            return self.weight.shape[1]
        if self.kind == "lowrank":
            return self.d_factor.shape[0]
        return None

    def dense_weight(self) -> np.ndarray:
        if self.kind == "linear":
            return self.weight
        if self.kind == "lowrank":
            return self.a_factor @ self.d_factor.T
        raise NetError("activation layers carry no weight")

    def clone(self) -> "LayerDef":
        copy = lambda a: None if a is None else a.copy()
        return LayerDef(
            kind=self.kind,
            weight=copy(self.weight),
            a_factor=copy(self.a_factor),
            d_factor=copy(self.d_factor),
            bias=copy(self.bias),
            activation=self.activation,
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            y = self.weight @ x
        elif self.kind == "lowrank":
            y = self.a_factor @ (self.d_factor.T @ x)
        else:
            return ACTIVATIONS[self.activation][0](x)
        if self.bias is not None:
            y = y + self.bias
        return y


@dataclass
class NetworkSpec:
    """Ordered layers with a final logit head of width ``vocab_size``.

    ``target_layers`` lists the indices of the linear layers eligible for
    compression.
    """

    layers: list[LayerDef]
    input_dim: int
    vocab_size: int
    target_layers: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            expected = layer.in_dim()
            if expected is not None and expected != dim:
                raise NetError(
                    f"layer {i} expects input dim {expected}, chain provides {dim}"
                )
            dim = layer.out_dim(dim)
        if dim != self.vocab_size:
            raise NetError(
                f"last layer output dim {dim} does not match vocab_size {self.vocab_size}"
            )
        for i in self.target_layers:
            if not (0 <= i < len(self.layers)) or self.layers[i].kind == "activation":
                raise NetError(f"target layer {i} is not a linear layer")

    def layer_out_dims(self) -> list[int]:
        dims = []
        dim = self.input_dim
        for layer in self.layers:
            dim = layer.out_dim(dim)
            dims.append(dim)
        return dims

    def clone(self) -> "NetworkSpec":
        """Deep copy: parameter arrays are duplicated so edits to the clone
        never leak into the source network."""
        return NetworkSpec(
            layers=[l.clone() for l in self.layers],
            input_dim=self.input_dim,
            vocab_size=self.vocab_size,
            target_layers=list(self.target_layers),
        )


@dataclass
class CalibrationBatch:
    """Token inputs (tokens x input_dim) and one target index per token."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = check_finite(np.atleast_2d(self.inputs), "calibration inputs")
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise NetError(
                f"{self.inputs.shape[0]} input rows vs {self.targets.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def validate_for(self, net: NetworkSpec) -> None:
        if len(self) == 0:
            raise NetError("empty calibration set")
        if self.inputs.shape[1] != net.input_dim:
            raise NetError(
                f"calibration input dim {self.inputs.shape[1]} vs network {net.input_dim}"
            )
        if np.any(self.targets < 0) or np.any(self.targets >= net.vocab_size):
            raise NetError("target index out of vocabulary range")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def forward(net: NetworkSpec, x: np.ndarray):
    """Evaluate the network on one token.

    Returns ``(logits, layer_inputs, layer_outputs)`` where ``layer_inputs[i]``
    is the exact vector seen by layer ``i``.
    """
    x = check_finite(np.asarray(x, dtype=np.float64), "input")
    if x.shape != (net.input_dim,):
        raise NetError(f"input shape {x.shape} does not match input dim {net.input_dim}")
    inputs: list[np.ndarray] = []
    outputs: list[np.ndarray] = []
    cur = x
    for i, layer in enumerate(net.layers):
        inputs.append(cur)
        try:
            cur = layer.apply(cur)
        except ValueError as exc:  # matmul shape failure
            raise NetError(f"dimension mismatch at layer {i}: {exc}") from exc
        outputs.append(cur)
    return cur, inputs, outputs


def _backprop_vector(net, inputs, grad_out: np.ndarray, stop_layer: int) -> np.ndarray:
    """Propagate a gradient w.r.t. the logits back to the *output* of
    ``stop_layer``."""
    g = grad_out
    for i in range(len(net.layers) - 1, stop_layer, -1):
        layer = net.layers[i]
        if layer.kind == "linear":
            g = layer.weight.T @ g
        elif layer.kind == "lowrank":
            g = layer.d_factor @ (layer.a_factor.T @ g)
        else:
            deriv = ACTIVATIONS[layer.activation][1](inputs[i])
            g = deriv * g if g.ndim == 1 else deriv[:, None] * g
    return g


def vjp_to_layer_outputs(net: NetworkSpec, inputs: list, seed: np.ndarray) -> dict:
    """One reverse pass from a logit-space seed (vector or V x K matrix) to the
    outputs of every target layer. Returns ``{layer: gradient}``."""
    wanted = sorted(net.target_layers, reverse=True)
    out: dict[int, np.ndarray] = {}
    g = seed
    pos = len(net.layers) - 1
    for layer_idx in wanted:
        for i in range(pos, layer_idx, -1):
            layer = net.layers[i]
            if layer.kind == "linear":
                g = layer.weight.T @ g
            elif layer.kind == "lowrank":
                g = layer.d_factor @ (layer.a_factor.T @ g)
            else:
                deriv = ACTIVATIONS[layer.activation][1](inputs[i])
                g = deriv * g if g.ndim == 1 else deriv[:, None] * g
        out[layer_idx] = g
        pos = layer_idx
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    return z - np.log(np.sum(np.exp(z)))


def calibration_loss_and_gradients(
    net: NetworkSpec,
    batch: CalibrationBatch,
    teacher_probs: np.ndarray | None = None,
):
    """Mean token loss and its gradient w.r.t. every target layer's parameters.

    The default loss is cross-entropy of softmax(logits) against the batch
    targets. When ``teacher_probs`` (tokens x vocab) is given, the loss is
    instead the mean KL from the teacher distribution to the model, which is
    the distillation-style variant; both share the same backward pass since
    d(loss)/d(logits) = softmax - target_distribution.
    """
    batch.validate_for(net)
    n_tokens = len(batch)
    if teacher_probs is not None and teacher_probs.shape != (n_tokens, net.vocab_size):
        raise NetError("teacher probability matrix shape mismatch")

    grads: dict[int, object] = {}
    for idx in net.target_layers:
        layer = net.layers[idx]
        if layer.kind == "linear":
            grads[idx] = np.zeros_like(layer.weight)
        else:
            grads[idx] = (np.zeros_like(layer.a_factor), np.zeros_like(layer.d_factor))

    total_loss = 0.0
    for t in range(n_tokens):
        logits, inputs, _ = forward(net, batch.inputs[t])
        logp = log_softmax(logits)
        p = np.exp(logp)
        if teacher_probs is None:
            total_loss += -float(logp[batch.targets[t]])
            dlogits = p.copy()
            dlogits[batch.targets[t]] -= 1.0
        else:
            q = teacher_probs[t]
            mask = q > 0.0
            total_loss += float(np.sum(q[mask] * (np.log(q[mask]) - logp[mask])))
            dlogits = p - q

        # walk backwards once, peeling off weight gradients at target layers
        g = dlogits
        for i in range(len(net.layers) - 1, -1, -1):
            layer = net.layers[i]
            if layer.kind == "linear":
                if i in grads:
                    grads[i] += np.outer(g, inputs[i])
                g = layer.weight.T @ g
            elif layer.kind == "lowrank":
                if i in grads:
                    z = layer.d_factor.T @ inputs[i]
                    ga, gd = grads[i]
                    ga += np.outer(g, z)
                    gd += np.outer(inputs[i], layer.a_factor.T @ g)
                g = layer.d_factor @ (layer.a_factor.T @ g)
            else:
                g = ACTIVATIONS[layer.activation][1](inputs[i]) * g

    scale = 1.0 / n_tokens
    for idx, val in grads.items():
        if isinstance(val, tuple):
            grads[idx] = (val[0] * scale, val[1] * scale)
        else:
            grads[idx] = val * scale
    return total_loss * scale, grads


def calibration_loss(net: NetworkSpec, batch: CalibrationBatch) -> float:
    batch.validate_for(net)
    total = 0.0
    for t in range(len(batch)):
        logits, _, _ = forward(net, batch.inputs[t])
        total += -float(log_softmax(logits)[batch.targets[t]])
    return total / len(batch)


def top_k_support(logits: np.ndarray, k: int):
    """Indices of the K largest logits (ties -> lower index) and the softmax
    renormalized on that support."""
    logits = np.asarray(logits, dtype=np.float64)
    v = logits.shape[0]
    if not 1 <= k <= v:
        raise NetError(f"top-k {k} out of range for vocab {v}")
    order = np.argsort(-logits, kind="stable")
    indices = order[:k]
    probs = softmax(logits[indices])
    return indices, probs


def vjp_from_logits(
    net: NetworkSpec,
    x: np.ndarray,
    v: np.ndarray,
    topk_indices: np.ndarray,
    layer: int,
) -> np.ndarray:
    """Gradient of sum_j v[j] * logits[topk_indices[j]] w.r.t. the output of
    ``layer``, computed by one reverse pass."""
    v = np.asarray(v, dtype=np.float64)
    topk_indices = np.asarray(topk_indices, dtype=np.int64)
    if v.shape != topk_indices.shape:
        raise NetError("seed vector and index list must have equal length")
    if np.any(topk_indices < 0) or np.any(topk_indices >= net.vocab_size):
        raise NetError("top-k index out of vocabulary range")
    if len(np.unique(topk_indices)) != len(topk_indices):
        raise NetError("top-k indices must be distinct")
    if layer not in net.target_layers:
        raise NetError(f"layer {layer} is not a target layer")
    _, inputs, _ = forward(net, x)
    seed = np.zeros(net.vocab_size)
    seed[topk_indices] = v
    return _backprop_vector(net, inputs, seed, layer)


def latent_project(d_factor: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Low-dimensional latent z = D^T x; caching z instead of A z is the
    decode-time memory saving for factored projections."""
    d_factor = np.asarray(d_factor, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if d_factor.shape[0] != x.shape[0]:
        raise NetError(
            f"projection rows {d_factor.shape[0]} do not match input dim {x.shape[0]}"
        )
    return d_factor.T @ x
