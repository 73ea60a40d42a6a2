"""Tree classifiers assembled from decision networks, TConv layers and leaf classifiers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Standardizer
from .nn import (
    DenseLayer,
    Mlp,
    MlpCache,
    build_mlp,
    mlp_backward,
    mlp_forward,
    softmax,
    softmax_backward,
)
from .tree import (
    TreeShape,
    layer_widths,
    materialize_transition,
    naive_chain,
    tconv_backward,
    tconv_forward,
)

LEAF_MODES = ("multi", "single")
DECISIONS = ("softmax", "sigmoid")

FORMAT_NAME = "tart-model"
FORMAT_VERSION = 1


@dataclass
class TartModel:
    """Decision banks (one per internal layer), leaf classifiers and a leaf-selection mode.

    ``decision_nets[d]`` is a bank of N_d networks stacked along a leading axis;
    it is empty when ``decision_layers == 0``. Leaves are a bank of N_D networks
    when ``leaf_layers >= 1``, otherwise one free logit vector per leaf.
    """

    shape: TreeShape
    decision_layers: int
    leaf_layers: int
    input_dim: int
    class_count: int
    hidden_units: int = 100
    leaf_mode: str = "multi"
    decision: str = "softmax"
    dropout_prob: float = 0.15
    decision_nets: list[Mlp] = field(default_factory=list)
    leaf_net: Mlp | None = None
    leaf_logits: np.ndarray | None = None
    standardizer: Standardizer | None = None

    def __post_init__(self):
        if self.leaf_mode not in LEAF_MODES:
            raise ValueError(f"leaf_mode must be one of {LEAF_MODES}")
        if self.decision not in DECISIONS:
            raise ValueError(f"decision must be one of {DECISIONS}")
        if self.decision == "sigmoid" and self.shape.window != 2:
            raise ValueError("sigmoid decisions require window 2")

    @property
    def widths(self) -> list[int]:
        return layer_widths(self.shape)

    @property
    def n_leaves(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for net in self.decision_nets:
            params.extend(net.parameters())
        if self.leaf_net is not None:
            params.extend(self.leaf_net.parameters())
        else:
            params.append(self.leaf_logits)
        return params

    def set_mode(self, mode: str) -> None:
        for net in self._nets():
            net.mode = mode

    def _nets(self):
        nets = list(self.decision_nets)
        if self.leaf_net is not None:
            nets.append(self.leaf_net)
        return nets

    def decision_net(self, d: int, i: int) -> Mlp:
        """View of the network of node ``i`` at layer ``d``; shares memory with the bank."""
        bank = self.decision_nets[d]
        return Mlp(
            [DenseLayer(layer.weights[i], layer.bias[i], layer.activation) for layer in bank.layers],
            bank.dropout_prob,
            bank.mode,
        )

    def leaf_classifier(self, u: int) -> Mlp:
        bank = self.leaf_net
        return Mlp(
            [DenseLayer(layer.weights[u], layer.bias[u], layer.activation) for layer in bank.layers],
            bank.dropout_prob,
            bank.mode,
        )

    def decision_softmax_weights(self, d: int) -> np.ndarray:
        """Weights (N_d, W, input_dim) of the equivalent softmax for linear decisions.

        A sigmoid decision sigma(w.x + b) equals softmax([w.x/2 + b/2, -w.x/2 - b/2]),
        so its effective weights are [w/2, -w/2].
        """
        if self.decision_layers != 1:
            raise ValueError("only single-layer decisions are linear")
        w = self.decision_nets[d].layers[0].weights
        if self.decision == "sigmoid":
            return np.concatenate([w / 2, -w / 2], axis=1)
        return w


def build_model(
    shape: TreeShape,
    decision_layers: int,
    leaf_layers: int,
    input_dim: int,
    class_count: int,
    hidden_units: int = 100,
    leaf_mode: str = "multi",
    rng: np.random.Generator | None = None,
    decision: str = "softmax",
    dropout_prob: float = 0.15,
) -> TartModel:
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if input_dim < 1:
        raise ValueError("input_dim must be at least 1")
    if decision_layers < 0 or leaf_layers < 0:
        raise ValueError("layer counts must be non-negative")
    if hidden_units < 1:
        raise ValueError("hidden_units must be at least 1")
    rng = np.random.default_rng() if rng is None else rng

    widths = layer_widths(shape)
    out = 1 if decision == "sigmoid" else shape.window
    decision_nets = []
    if decision_layers > 0:
        for d in range(shape.depth):
            decision_nets.append(
                build_mlp(input_dim, out, decision_layers, hidden_units, rng,
                          bank=widths[d], dropout_prob=dropout_prob)
            )
    leaf_net = leaf_logits = None
    if leaf_layers > 0:
        leaf_net = build_mlp(input_dim, class_count, leaf_layers, hidden_units, rng,
                             bank=widths[-1], dropout_prob=dropout_prob)
    else:
        leaf_logits = np.zeros((widths[-1], class_count))
    return TartModel(
        shape, decision_layers, leaf_layers, input_dim, class_count,
        hidden_units=hidden_units, leaf_mode=leaf_mode, decision=decision,
        dropout_prob=dropout_prob, decision_nets=decision_nets,
        leaf_net=leaf_net, leaf_logits=leaf_logits,
    )


# ---------------------------------------------------------------- presets


@dataclass(frozen=True)
class Preset:
    name: str
    window: int
    stride: int
    depth: int
    decision_layers: int
    leaf_layers: int
    leaf_mode: str
    note: str

    @property
    def shape(self) -> TreeShape:
        return TreeShape(self.window, self.stride, self.depth)

    def row(self) -> str:
        return (f"{self.name} {self.window} {self.stride} {self.depth} "
                f"{self.decision_layers} {self.leaf_layers}")


PRESETS = {
    "A": Preset("A", 2, 2, 6, 1, 1, "multi", "linear leaves, strong on small data"),
    "B": Preset("B", 2, 2, 2, 1, 4, "single", "nonlinear leaves, strong on large data"),
    "C": Preset("C", 3, 2, 3, 1, 2, "single", "three-way overlapping decisions, balanced"),
}


def build_preset(name: str, input_dim: int, class_count: int, rng=None, **kwargs) -> TartModel:
    p = PRESETS[name.upper()]
    kwargs.setdefault("leaf_mode", p.leaf_mode)
    return build_model(p.shape, p.decision_layers, p.leaf_layers, input_dim,
                       class_count, rng=rng, **kwargs)


FAMILIES = {
    "logistic-regression": "D = 0, L = 1",
    "multilayer-perceptron": "D = 0, L > 1",
    "simple-ensemble": "D > 0, H = 0, any L",
    "tree-type-1": "D > 0, H = 1, L = 0",
    "tree-type-2": "D > 0, H > 1, L = 1",
    "tree-type-3": "D > 0, H = 1, L > 1",
}


def classify_family(depth: int, decision_layers: int, leaf_layers: int) -> str:
    """Name the classifier family a (D, H, L) triple falls in.

    Triples outside the table rows go to the closest row: D = 0 with L = 0 is
    an intercept-only logistic regression, H = 1 with L = 1 counts as type 3
    (learned leaf classifiers) and any H > 1 as type 2 (nonlinear splits).
    """
    if min(depth, decision_layers, leaf_layers) < 0:
        raise ValueError("counts must be non-negative")
    if depth == 0:
        return "multilayer-perceptron" if leaf_layers > 1 else "logistic-regression"
    if decision_layers == 0:
        return "simple-ensemble"
    if decision_layers > 1:
        return "tree-type-2"
    return "tree-type-1" if leaf_layers == 0 else "tree-type-3"


# ---------------------------------------------------------------- forward / backward


@dataclass
class ForwardCache:
    x: np.ndarray  # (n, input_dim)
    vector_input: bool
    decision_caches: list[MlpCache | None]
    transitions: list[np.ndarray]  # (n, W, N_d) per layer
    arrivals: list[np.ndarray]  # (n, N_d) for d = 0..D
    leaf_cache: MlpCache | None
    leaf_probs: np.ndarray  # (n, N_D, C)

    @property
    def arrival(self) -> np.ndarray:
        return self.arrivals[-1]


def _as_batch(m: TartModel, x):
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    if vector_input:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ValueError(f"expected inputs with {m.input_dim} features, got shape {x.shape}")
    return x, vector_input


def _decision_probs(m: TartModel, d: int, x, rng):
    n = x.shape[0]
    width = m.widths[d]
    if m.decision_layers == 0:
        return np.full((n, m.shape.window, width), 1.0 / m.shape.window), None
    logits, cache = mlp_forward(m.decision_nets[d], x, rng)  # (N_d, n, out)
    if m.decision == "sigmoid":
        logits = np.concatenate([logits / 2, -logits / 2], axis=-1)
    probs = softmax(logits)
    return probs.transpose(1, 2, 0), cache


def _leaf_probs(m: TartModel, x, rng):
    if m.leaf_net is None:
        probs = softmax(m.leaf_logits)
        return np.broadcast_to(probs, (x.shape[0],) + probs.shape), None
    logits, cache = mlp_forward(m.leaf_net, x, rng)  # (N_D, n, C)
    return softmax(logits).transpose(1, 0, 2), cache


def forward(m: TartModel, x, rng: np.random.Generator | None = None) -> ForwardCache:
    x, vector_input = _as_batch(m, x)
    n = x.shape[0]
    caches, transitions = [], []
    for d in range(m.shape.depth):
        b, cache = _decision_probs(m, d, x, rng)
        caches.append(cache)
        transitions.append(b)
    arrivals = [np.ones((n, 1))]
    for b in transitions:
        arrivals.append(tconv_forward(b, arrivals[-1], m.shape.stride))
    leaf_probs, leaf_cache = _leaf_probs(m, x, rng)
    return ForwardCache(x, vector_input, caches, transitions, arrivals, leaf_cache, leaf_probs)


def backward(m: TartModel, cache: ForwardCache, grad_arrival=None, grad_leaf_probs=None):
    """Chain rule from (p_D, leaf probabilities) back to every parameter and the input.

    ``grad_arrival`` has shape (n, N_D) and ``grad_leaf_probs`` (n, N_D, C);
    either may be None. Returns ``(grads, grad_x)`` with ``grads`` aligned with
    ``m.parameters()`` and ``grad_x`` of shape (n, input_dim).
    """
    n = cache.x.shape[0]
    grad_x = np.zeros_like(cache.x)
    decision_grads: list[list[np.ndarray]] = []

    g = np.zeros((n, m.n_leaves)) if grad_arrival is None else np.asarray(grad_arrival)
    for d in range(m.shape.depth - 1, -1, -1):
        b = cache.transitions[d]
        grad_b, g = tconv_backward(b, cache.arrivals[d], m.shape.stride, g)
        if m.decision_layers == 0:
            continue
        probs = b.transpose(2, 0, 1)  # (N_d, n, W)
        g_logits = softmax_backward(probs, grad_b.transpose(2, 0, 1))
        if m.decision == "sigmoid":
            g_logits = (g_logits[..., :1] - g_logits[..., 1:]) / 2
        gx, grads = mlp_backward(m.decision_nets[d], cache.decision_caches[d], g_logits)
        grad_x += gx
        decision_grads.append(grads)
    decision_grads.reverse()

    if grad_leaf_probs is None:
        grad_leaf_probs = np.zeros_like(cache.leaf_probs)
    probs = cache.leaf_probs.transpose(1, 0, 2)  # (N_D, n, C)
    g_logits = softmax_backward(probs, np.asarray(grad_leaf_probs).transpose(1, 0, 2))
    if m.leaf_net is not None:
        gx, leaf_grads = mlp_backward(m.leaf_net, cache.leaf_cache, g_logits)
        grad_x += gx
    else:
        leaf_grads = [g_logits.sum(axis=1)]

    grads = [g for layer in decision_grads for g in layer] + leaf_grads
    return grads, grad_x


# ---------------------------------------------------------------- inference


def _squeeze(cache: ForwardCache, a):
    return a[0] if cache.vector_input else a


def local_transitions(m: TartModel, x, rng: np.random.Generator | None = None):
    """Local transition matrices B_d (W x N_d per example) and the decision caches."""
    x, vector_input = _as_batch(m, x)
    bs, caches = [], []
    for d in range(m.shape.depth):
        b, cache = _decision_probs(m, d, x, rng)
        bs.append(b[0] if vector_input else b)
        caches.append(cache)
    return bs, caches


def arrival_probabilities(m: TartModel, x, rng: np.random.Generator | None = None):
    cache = forward(m, x, rng)
    return _squeeze(cache, cache.arrival)


def naive_arrival_probabilities(m: TartModel, x):
    """Same as ``arrival_probabilities`` via dense materialized transition matrices."""
    bs, _ = local_transitions(m, x)
    ts = [materialize_transition(b, m.shape.stride) for b in bs]
    x = np.asarray(x)
    p0 = np.ones(1) if x.ndim == 1 else np.ones((x.shape[0], 1))
    return naive_chain(ts, p0)


def leaf_predictions(m: TartModel, x):
    """Class probabilities of every leaf: (N_D, C), or (n, N_D, C) for a batch."""
    x, vector_input = _as_batch(m, x)
    probs = np.array(_leaf_probs(m, x, None)[0])
    return probs[0] if vector_input else probs


def _combine_multi(cache: ForwardCache):
    return np.einsum("nu,nuc->nc", cache.arrival, cache.leaf_probs)


def _combine_single(cache: ForwardCache):
    chosen = np.argmax(cache.arrival, axis=1)
    return cache.leaf_probs[np.arange(chosen.size), chosen], chosen


def predict_multi(m: TartModel, x):
    cache = forward(m, x)
    return _squeeze(cache, _combine_multi(cache))


def predict_single(m: TartModel, x):
    """Prediction of the leaf with the largest arrival probability (lowest index on ties)."""
    cache = forward(m, x)
    probs, chosen = _combine_single(cache)
    if cache.vector_input:
        return probs[0], int(chosen[0])
    return probs, chosen


def predict(m: TartModel, x, mode: str | None = None):
    mode = m.leaf_mode if mode is None else mode
    if mode == "multi":
        return predict_multi(m, x)
    if mode == "single":
        return predict_single(m, x)[0]
    raise ValueError(f"unknown leaf mode {mode!r}")


# ---------------------------------------------------------------- persistence


def _encode(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _decode(obj) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def _encode_mlp(net: Mlp) -> list[dict]:
    return [
        {"activation": layer.activation, "weights": _encode(layer.weights), "bias": _encode(layer.bias)}
        for layer in net.layers
    ]


def _decode_mlp(layers: list[dict], dropout_prob: float) -> Mlp:
    return Mlp(
        [DenseLayer(_decode(d["weights"]), _decode(d["bias"]), d["activation"]) for d in layers],
        dropout_prob=dropout_prob,
    )


def model_to_dict(m: TartModel) -> dict:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "shape": {"window": m.shape.window, "stride": m.shape.stride, "depth": m.shape.depth},
        "decision_layers": m.decision_layers,
        "leaf_layers": m.leaf_layers,
        "input_dim": m.input_dim,
        "class_count": m.class_count,
        "hidden_units": m.hidden_units,
        "leaf_mode": m.leaf_mode,
        "decision": m.decision,
        "dropout_prob": m.dropout_prob,
        "decision_nets": [_encode_mlp(net) for net in m.decision_nets],
        "leaf_net": None if m.leaf_net is None else _encode_mlp(m.leaf_net),
        "leaf_logits": None if m.leaf_logits is None else _encode(m.leaf_logits),
        "standardizer": None,
    }
    if m.standardizer is not None:
        doc["standardizer"] = {
            "means": _encode(m.standardizer.means),
            "stds": _encode(m.standardizer.stds),
        }
    return doc


def model_from_dict(doc: dict) -> TartModel:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError("not a tart model document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    shape = TreeShape(**doc["shape"])
    p = doc["dropout_prob"]
    std = doc.get("standardizer")
    m = TartModel(
        shape,
        doc["decision_layers"],
        doc["leaf_layers"],
        doc["input_dim"],
        doc["class_count"],
        hidden_units=doc["hidden_units"],
        leaf_mode=doc["leaf_mode"],
        decision=doc["decision"],
        dropout_prob=p,
        decision_nets=[_decode_mlp(net, p) for net in doc["decision_nets"]],
        leaf_net=None if doc["leaf_net"] is None else _decode_mlp(doc["leaf_net"], p),
        leaf_logits=None if doc["leaf_logits"] is None else _decode(doc["leaf_logits"]),
        standardizer=None if std is None else Standardizer(_decode(std["means"]), _decode(std["stds"])),
    )
    widths = m.widths
    if len(m.decision_nets) != (m.shape.depth if m.decision_layers else 0):
        raise ValueError("decision bank count does not match depth")
    for d, net in enumerate(m.decision_nets):
        if net.bank_shape != (widths[d],):
            raise ValueError(f"decision bank {d} has {net.bank_shape} nodes, expected {widths[d]}")
    return m


def save_model(m: TartModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> TartModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
