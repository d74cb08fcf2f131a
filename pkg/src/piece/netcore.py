"""Minimal dense feedforward engine with exact reverse-mode gradients.

Everything runs on float64 numpy arrays. Networks are plain ordered layer
lists; `forward` returns a full activation trace so `backward` can reuse
dropout masks and intermediate values bit-exactly. Gradients are available
for both parameters and inputs, which lets callers chain several networks
(generator into feature extractor into classifier head) by hand.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from typing import ClassVar, Optional, Union

import numpy as np

Array = np.ndarray

NETWORK_MAGIC = "piece-network"
NETWORK_FORMAT_VERSION = 1

ROLES = ("classifier", "generator", "autoencoder", "encoder")


class NetError(Exception):
    """Base error for the network engine."""


class DimensionError(NetError):
    pass


class NumericsError(NetError):
    pass


class TraceMismatchError(NetError):
    pass


class NetworkFormatError(NetError):
    pass


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Dense:
    weight: Array  # (out_dim, in_dim)
    bias: Array  # (out_dim,)
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("dense layer needs 2-d weight and 1-d bias")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"dense bias length {self.bias.shape[0]} does not match "
                f"output dim {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ReLU:
    kind: ClassVar[str] = "relu"


@dataclass
class Dropout:
    rate: float
    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise DimensionError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass
class SoftMax:
    kind: ClassVar[str] = "softmax"


@dataclass
class Sigmoid:
    kind: ClassVar[str] = "sigmoid"


LayerSpec = Union[Dense, ReLU, Dropout, SoftMax, Sigmoid]


def _layer_dims(layers: list) -> list[Optional[int]]:
    """Output dimension after each layer (None until the first Dense)."""
    dims: list[Optional[int]] = []
    cur: Optional[int] = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if cur is not None and layer.in_dim != cur:
                raise DimensionError(
                    f"layer {i} (dense) expects input dim {layer.in_dim}, "
                    f"previous layer provides {cur}"
                )
            cur = layer.out_dim
        dims.append(cur)
    return dims


@dataclass
class Network:
    """Ordered feedforward layer list with an optional feature-tap index.

    For classifiers, `feature_tap` marks the relu layer whose output is the
    latent feature vector; the head after it must contain exactly one dense
    layer producing class logits.
    """

    layers: list
    role: str
    feature_tap: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DimensionError(f"unknown network role {self.role!r}")
        if not self.layers:
            raise DimensionError("network needs at least one layer")
        _layer_dims(self.layers)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SoftMax) and i != len(self.layers) - 1:
                raise DimensionError("softmax allowed only as the final layer")
        if self.feature_tap is not None:
            if not (0 <= self.feature_tap < len(self.layers)):
                raise DimensionError(f"feature_tap {self.feature_tap} out of range")
            if self.role == "classifier":
                if not isinstance(self.layers[self.feature_tap], ReLU):
                    raise DimensionError("classifier feature_tap must be a relu layer")
                head = self.layers[self.feature_tap + 1 :]
                if sum(isinstance(l, Dense) for l in head) != 1:
                    raise DimensionError(
                        "classifier head must contain exactly one dense layer"
                    )

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
        raise DimensionError("network has no dense layer")

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_dim
        raise DimensionError("network has no dense layer")

    def has_dropout(self) -> bool:
        return any(isinstance(l, Dropout) for l in self.layers)


def split_at_tap(net: Network) -> tuple[Network, Network]:
    """Split a classifier into (feature extractor, head). Layers are shared."""
    if net.feature_tap is None:
        raise DimensionError("network has no feature_tap")
    body = Network(net.layers[: net.feature_tap + 1], role=net.role, feature_tap=None)
    head = Network(net.layers[net.feature_tap + 1 :], role=net.role, feature_tap=None)
    return body, head


def class_weight_vector(net: Network, cls: int) -> Array:
    """Weight row connecting the feature layer to the logit of `cls`."""
    _, head = split_at_tap(net)
    dense = [l for l in head.layers if isinstance(l, Dense)][0]
    if not (0 <= cls < dense.out_dim):
        raise DimensionError(f"class {cls} out of range for head width {dense.out_dim}")
    return dense.weight[cls].copy()


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class ForwardTrace:
    """Per-layer outputs of one forward pass, plus dropout masks used.

    Replaying the stored values reproduces the output bit-exactly; backward
    reuses the masks, so train-mode gradients match the sampled network.
    """

    inputs: Array
    outputs: list
    masks: dict
    mode: str
    seed: Optional[int]
    squeezed: bool

    @property
    def output(self) -> Array:
        out = self.outputs[-1]
        return out[0] if self.squeezed else out


def _as_batch(x, what="input") -> tuple[Array, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise DimensionError(f"{what} must be 1-d or 2-d, got shape {arr.shape}")


def _softmax(x: Array) -> Array:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(
    net: Network,
    input,
    mode: str = "eval",
    rng_seed: Optional[int] = None,
    check_finite: bool = True,
) -> ForwardTrace:
    """Run the network on a vector or a batch of row vectors.

    In train mode dropout applies inverted scaling (divide by keep
    probability) so eval mode is the expectation; masks come from a stream
    seeded with `rng_seed`, which is required whenever the network contains
    dropout. Eval mode treats dropout as identity.
    """
    if mode not in ("train", "eval"):
        raise DimensionError(f"mode must be 'train' or 'eval', got {mode!r}")
    x, squeezed = _as_batch(input)
    if x.shape[1] != net.input_dim:
        raise DimensionError(
            f"input width {x.shape[1]} does not match first dense layer "
            f"({net.input_dim})"
        )
    rng = None
    if mode == "train" and net.has_dropout():
        if rng_seed is None:
            raise DimensionError("train mode requires rng_seed when dropout present")
        rng = np.random.default_rng(rng_seed)

    outputs: list = []
    masks: dict = {}
    cur = x
    # overflow surfaces as a NumericsError (or a deliberately tolerated
    # non-finite row when check_finite is off), not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        outputs, masks = _run_layers(net, cur, mode, rng, check_finite)
    return ForwardTrace(x, outputs, masks, mode, rng_seed, squeezed)


def _run_layers(net, cur, mode, rng, check_finite):
    outputs: list = []
    masks: dict = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            if cur.shape[1] != layer.in_dim:
                raise DimensionError(
                    f"layer {i} (dense) expects width {layer.in_dim}, got {cur.shape[1]}"
                )
            cur = cur @ layer.weight.T + layer.bias
        elif isinstance(layer, ReLU):
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.rate > 0.0:
                keep = rng.random(cur.shape) >= layer.rate
                mask = keep / (1.0 - layer.rate)
                masks[i] = mask
                cur = cur * mask
            else:
                cur = cur.copy()
        elif isinstance(layer, SoftMax):
            cur = _softmax(cur)
        elif isinstance(layer, Sigmoid):
            cur = _sigmoid(cur)
        else:
            raise DimensionError(f"layer {i}: unknown layer kind {layer!r}")
        if check_finite and not np.all(np.isfinite(cur)):
            raise NumericsError(f"non-finite values after layer {i} ({layer.kind})")
        outputs.append(cur)
    return outputs, masks


def backward(
    net: Network, trace: ForwardTrace, output_grad
) -> tuple[list, Array]:
    """Exact reverse-mode gradients for one traced forward pass.

    Returns (per-layer parameter gradients, gradient w.r.t. the input).
    Parameter entries are (dW, db) for dense layers and None otherwise.
    Dropout masks recorded in the trace are reused, and the relu subgradient
    at exactly zero is zero.
    """
    if len(trace.outputs) != len(net.layers):
        raise TraceMismatchError(
            f"trace has {len(trace.outputs)} layer outputs, network has "
            f"{len(net.layers)} layers"
        )
    g, _ = _as_batch(output_grad, what="output_grad")
    if g.shape != trace.outputs[-1].shape:
        raise TraceMismatchError(
            f"output_grad shape {g.shape} does not match trace output "
            f"{trace.outputs[-1].shape}"
        )
    param_grads: list = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        layer_in = trace.inputs if i == 0 else trace.outputs[i - 1]
        if isinstance(layer, Dense):
            if layer_in.shape[1] != layer.in_dim:
                raise TraceMismatchError(f"trace does not match layer {i} (dense)")
            dw = g.T @ layer_in
            db = g.sum(axis=0)
            param_grads[i] = (dw, db)
            g = g @ layer.weight
        elif isinstance(layer, ReLU):
            g = g * (layer_in > 0.0)
        elif isinstance(layer, Dropout):
            if i in trace.masks:
                g = g * trace.masks[i]
        elif isinstance(layer, SoftMax):
            s = trace.outputs[i]
            g = s * (g - (g * s).sum(axis=1, keepdims=True))
        elif isinstance(layer, Sigmoid):
            s = trace.outputs[i]
            g = g * s * (1.0 - s)
    input_grad = g[0] if trace.squeezed else g
    return param_grads, input_grad


# ---------------------------------------------------------------------------
# Losses


_CE_CLAMP = 1e-12  # avoids NaN on saturated softmax outputs


def loss(kind: str, prediction, target) -> tuple[float, Array]:
    """Loss value and gradient w.r.t. the prediction.

    mse averages over all elements, l2_sq is the plain squared euclidean
    distance, cross_entropy expects probability rows and one-hot targets
    (probabilities clamped at 1e-12) and averages over rows.
    """
    p, squeezed = _as_batch(prediction, what="prediction")
    t, _ = _as_batch(target, what="target")
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and target {t.shape} differ")
    if kind == "mse":
        d = p - t
        value = float(np.mean(d * d))
        grad = 2.0 * d / d.size
    elif kind == "l2_sq":
        d = p - t
        value = float(np.sum(d * d))
        grad = 2.0 * d
    elif kind == "cross_entropy":
        if np.any((t != 0.0) & (t != 1.0)) or np.any(t.sum(axis=1) != 1.0):
            raise DimensionError("cross_entropy target must be one-hot rows")
        clamped = np.maximum(p, _CE_CLAMP)
        n = p.shape[0]
        value = float(-np.sum(t * np.log(clamped)) / n)
        grad = -(t / clamped) / n
    else:
        raise DimensionError(f"unknown loss kind {kind!r}")
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericsError(f"non-finite {kind} loss")
    return value, (grad[0] if squeezed else grad)


def one_hot(index: int, n_classes: int) -> Array:
    if not (0 <= index < n_classes):
        raise DimensionError(f"class {index} out of range ({n_classes})")
    v = np.zeros(n_classes)
    v[index] = 1.0
    return v


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def init(cls, params: list) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: list,
    grads: list,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list, AdamState]:
    """One functional Adam update; returns new parameter arrays and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params/grads/state length mismatch")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} vs grad shape {g.shape}")
        m1 = beta1 * m + (1.0 - beta1) * g
        v1 = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m1 / (1.0 - beta1**t)
        v_hat = v1 / (1.0 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m1)
        new_v.append(v1)
    return new_params, AdamState(t, new_m, new_v)


def parameters(net: Network) -> list:
    """Dense parameters in layer order: weight, bias, weight, bias, ..."""
    out = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            out.append(layer.weight)
            out.append(layer.bias)
    return out


def flatten_param_grads(net: Network, param_grads: list) -> list:
    """Match `parameters` ordering from a backward() result."""
    out = []
    for layer, pg in zip(net.layers, param_grads):
        if isinstance(layer, Dense):
            dw, db = pg
            out.append(dw)
            out.append(db)
    return out


def replace_parameters(net: Network, params: list) -> Network:
    """New network with the given dense parameters (other layers shared)."""
    layers = []
    it = iter(params)
    for layer in net.layers:
        if isinstance(layer, Dense):
            layers.append(Dense(next(it), next(it)))
        else:
            layers.append(layer)
    return Network(layers, role=net.role, feature_tap=net.feature_tap)


# ---------------------------------------------------------------------------
# Serialization


def _encode(arr: Array) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, "<f8").tobytes()).decode("ascii")


def _decode(text: str, count: int, where: str) -> Array:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) != 8 * count:
        raise NetworkFormatError(
            f"{where}: expected {8 * count} bytes of parameters, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _layer_checksum(layer: Dense) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(layer.weight, "<f8").tobytes())
    h.update(np.ascontiguousarray(layer.bias, "<f8").tobytes())
    return h.hexdigest()


def save_network(net: Network, path, provenance: Optional[dict] = None) -> None:
    """Write the versioned network document (bit-exact round trip)."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            layers.append(
                {
                    "kind": "dense",
                    "in_dim": layer.in_dim,
                    "out_dim": layer.out_dim,
                    "weight": _encode(layer.weight),
                    "bias": _encode(layer.bias),
                    "checksum": _layer_checksum(layer),
                }
            )
        elif isinstance(layer, Dropout):
            layers.append({"kind": "dropout", "rate": layer.rate})
        else:
            layers.append({"kind": layer.kind})
    doc = {
        "format": NETWORK_MAGIC,
        "format_version": NETWORK_FORMAT_VERSION,
        "role": net.role,
        "feature_tap": net.feature_tap,
        "layers": layers,
    }
    if provenance:
        doc["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_network(path) -> Network:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise NetworkFormatError(f"malformed network file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != NETWORK_MAGIC:
        raise NetworkFormatError(f"{path}: not a network file (bad magic)")
    if doc.get("format_version") != NETWORK_FORMAT_VERSION:
        raise NetworkFormatError(
            f"{path}: unsupported format version {doc.get('format_version')!r}"
        )
    layers: list = []
    for i, spec in enumerate(doc["layers"]):
        kind = spec.get("kind")
        if kind == "dense":
            out_dim, in_dim = int(spec["out_dim"]), int(spec["in_dim"])
            weight = _decode(spec["weight"], out_dim * in_dim, f"layer {i} weight").reshape(
                out_dim, in_dim
            )
            bias = _decode(spec["bias"], out_dim, f"layer {i} bias")
            dense = Dense(weight, bias)
            if _layer_checksum(dense) != spec.get("checksum"):
                raise NetworkFormatError(f"layer {i}: checksum mismatch")
            layers.append(dense)
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "dropout":
            layers.append(Dropout(float(spec["rate"])))
        elif kind == "softmax":
            layers.append(SoftMax())
        elif kind == "sigmoid":
            layers.append(Sigmoid())
        else:
            raise NetworkFormatError(f"layer {i}: unknown kind {kind!r}")
    tap = doc.get("feature_tap")
    return Network(layers, role=doc["role"], feature_tap=None if tap is None else int(tap))


def load_provenance(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return doc.get("provenance", {})


def networks_equal(a: Network, b: Network) -> bool:
    if a.role != b.role or a.feature_tap != b.feature_tap:
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind:
            return False
        if isinstance(la, Dense):
            if not (np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)):
                return False
        if isinstance(la, Dropout) and la.rate != lb.rate:
            return False
    return True
