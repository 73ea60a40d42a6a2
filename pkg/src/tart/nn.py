"""Dense kernels and a small numpy MLP with hand-written backward passes.

Parameters of a network may carry a leading "bank" axis: a bank of K networks
with identical layer dimensions is stored as weights of shape (K, out, in) and
evaluated in one batched matmul. Every internal node of a tree layer is one
member of such a bank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLAMP_EPS = 1e-12

ACTIVATIONS = ("elu", "identity")
MODES = ("train", "infer")


def elu(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z):
    """Derivative of elu; equals elu(z) + 1 on the non-positive branch."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs, grad_probs, axis=-1):
    """Vector-Jacobian product of softmax given its output."""
    inner = np.sum(probs * grad_probs, axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def he_init(out_dim: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    if out_dim < 1 or in_dim < 1:
        raise ValueError(f"dimensions must be positive, got ({out_dim}, {in_dim})")
    return rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (..., out, in)
    bias: np.ndarray  # (..., out)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim < 2 or self.weights.shape[:-1] != self.bias.shape:
            raise ValueError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[-1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[-2]


@dataclass
class Mlp:
    layers: list[DenseLayer]
    dropout_prob: float = 0.0
    mode: str = "infer"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].activation != "identity":
            raise ValueError("the final layer must emit raw logits")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def bank_shape(self) -> tuple[int, ...]:
        return self.layers[0].weights.shape[:-2]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: w0, b0, w1, b1, ..."""
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.bias])
        return params


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    x_shape: tuple[int, ...] = ()
    vector_input: bool = False


def build_mlp(
    in_dim: int,
    out_dim: int,
    n_layers: int,
    hidden_units: int,
    rng: np.random.Generator,
    bank: int | None = None,
    dropout_prob: float = 0.0,
) -> Mlp:
    """He-initialized MLP with ``n_layers`` dense layers and ELU between them.

    With ``bank=K`` every parameter gets a leading axis of size K, each member
    drawn independently.
    """
    if n_layers < 1:
        raise ValueError("n_layers must be at least 1")
    dims = [in_dim] + [hidden_units] * (n_layers - 1) + [out_dim]
    layers = []
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        if bank is None:
            w = he_init(d_out, d_in, rng)
            b = np.zeros(d_out)
        else:
            w = np.stack([he_init(d_out, d_in, rng) for _ in range(bank)])
            b = np.zeros((bank, d_out))
        act = "identity" if k == n_layers - 1 else "elu"
        layers.append(DenseLayer(w, b, act))
    return Mlp(layers, dropout_prob=dropout_prob)


def mlp_forward(m: Mlp, x, rng: np.random.Generator | None = None):
    """Run ``m`` on ``x`` of shape (in,) or (n, in).

    Returns logits of shape bank + (n, out) (the n axis dropped for vector
    input) and the cache needed by ``mlp_backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    if vector_input:
        x = x[None, :]
    if x.shape[-1] != m.in_dim:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {m.in_dim}")
    train = m.mode == "train" and m.dropout_prob > 0.0
    if train and rng is None:
        raise ValueError("train-mode dropout needs an rng")

    cache = MlpCache(x_shape=x.shape, vector_input=vector_input)
    h = x
    last = len(m.layers) - 1
    for k, layer in enumerate(m.layers):
        cache.inputs.append(h)
        z = h @ np.swapaxes(layer.weights, -1, -2) + layer.bias[..., None, :]
        cache.pre.append(z)
        if layer.activation == "elu":
            h = elu(z)
        else:
            h = z
        mask = None
        if k < last and train:
            keep = 1.0 - m.dropout_prob
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        cache.masks.append(mask)
    if vector_input:
        h = h[..., 0, :]
    return h, cache


def _reduce_to(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def mlp_backward(m: Mlp, cache: MlpCache, grad_logits):
    """Backpropagate ``grad_logits`` through ``m``.

    Returns ``(grad_x, grads)`` where ``grads`` is aligned with
    ``m.parameters()``. When a bank shares one input, grad_x sums the members.
    """
    if len(cache.pre) != len(m.layers):
        raise ValueError("cache does not belong to this network")
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.vector_input:
        g = g[..., None, :]
    if g.shape != cache.pre[-1].shape:
        raise ValueError(f"grad_logits shape {g.shape} != logits shape {cache.pre[-1].shape}")

    grads: list[np.ndarray] = [None] * (2 * len(m.layers))  # type: ignore[list-item]
    for k in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[k]
        if k < len(m.layers) - 1:
            if cache.masks[k] is not None:
                g = g * cache.masks[k]
            if layer.activation == "elu":
                g = g * elu_grad(cache.pre[k])
        h = cache.inputs[k]
        gw = np.swapaxes(g, -1, -2) @ h
        grads[2 * k] = _reduce_to(gw, layer.weights.shape)
        grads[2 * k + 1] = _reduce_to(g.sum(axis=-2), layer.bias.shape)
        g = g @ layer.weights
    grad_x = _reduce_to(g, cache.x_shape)
    if cache.vector_input:
        grad_x = grad_x[0]
    return grad_x, grads


def cross_entropy(pred, label: int):
    """Clamped cross-entropy of a probability vector against a class index."""
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= label < pred.shape[-1]:
        raise ValueError(f"label {label} out of range for {pred.shape[-1]} classes")
    if abs(pred.sum() - 1.0) > 1e-6:
        raise ValueError("pred must sum to 1")
    p = pred[label]
    grad = np.zeros_like(pred)
    if p > CLAMP_EPS:
        grad[label] = -1.0 / p
    return -np.log(max(p, CLAMP_EPS)), grad
