"""Feature relevance for trees with linear decisions and linear (or constant) leaves.

Relevance is pushed from the root to the leaves with two rules. Sums add
relevances; products v1*v2 take (v2*r(v1) + v1*r(v2)) / 2. The root
probability is a constant with zero relevance, so the relevance of an arrival
probability at depth d sums to (1 - 2**-d) times its value rather than the
value itself. Nothing is renormalized.

Decision and leaf outputs are softmax classifiers explained with the z+ rule:
r_k = max(w_ik x_k, 0) / sum_j max(w_ij x_j, 0) * f_i. Biases get no relevance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import TartModel, backward, forward, local_transitions
from .tree import tconv_forward

FALLBACKS = ("grad-x-input",)


class UnsupportedStructure(ValueError):
    pass


@dataclass
class RelevanceVector:
    scores: np.ndarray
    value: float


@dataclass
class RelevanceReport:
    classes: list[RelevanceVector]
    leaves: list[RelevanceVector]
    prediction: np.ndarray
    chosen_leaf: int | None
    mode: str
    method: str  # "lrp" or "grad-x-input"

    def matrix(self) -> np.ndarray:
        return np.stack([r.scores for r in self.classes])


def conservation_factor(depth: int) -> float:
    return 1.0 - 2.0 ** (-depth)


def linear_relevance(f_grad, x, value: float) -> RelevanceVector:
    f_grad = np.asarray(f_grad, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if f_grad.shape != x.shape:
        raise ValueError("gradient and input must have the same length")
    return RelevanceVector(f_grad * x, float(value))


def _zplus(weights, x, probs):
    """z+ relevances for stacked softmax classifiers.

    weights (..., C, K), x (K,), probs (..., C) -> scores (..., C, K).
    Rows whose positive contributions all vanish get zero scores.
    """
    pos = np.maximum(weights * x, 0.0)
    denom = pos.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, pos / safe, 0.0) * probs[..., None]


def softmax_relevance(weights, x, probs, class_i: int) -> RelevanceVector:
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if weights.shape != (probs.shape[0], x.shape[0]):
        raise ValueError(f"weights {weights.shape} do not match probs {probs.shape} and x {x.shape}")
    scores = _zplus(weights[class_i], x, probs[class_i])
    return RelevanceVector(scores, float(probs[class_i]))


def relevance_add(a: RelevanceVector, b: RelevanceVector) -> RelevanceVector:
    if a.scores.shape != b.scores.shape:
        raise ValueError("relevance vectors differ in length")
    return RelevanceVector(a.scores + b.scores, a.value + b.value)


def relevance_mul(a: RelevanceVector, b: RelevanceVector) -> RelevanceVector:
    if a.scores.shape != b.scores.shape:
        raise ValueError("relevance vectors differ in length")
    return RelevanceVector((b.value * a.scores + a.value * b.scores) / 2, a.value * b.value)


def _require_linear_decisions(m: TartModel):
    if m.shape.depth > 0 and m.decision_layers != 1:
        raise UnsupportedStructure(
            f"relevance propagation needs single-layer decisions (H = 1), got H = {m.decision_layers}"
        )


def _arrival_relevance(m: TartModel, x):
    """Arrival relevance scores (N_D, K) and arrival probabilities (N_D,)."""
    _require_linear_decisions(m)
    stride = m.shape.stride
    scores = np.zeros((1, x.shape[0]))
    values = np.ones(1)
    bs, _ = local_transitions(m, x)
    for d, b in enumerate(bs):
        window, n = b.shape
        bt = b.T  # (N_d, W)
        rel_t = _zplus(m.decision_softmax_weights(d), x, bt)  # (N_d, W, K)
        contrib = 0.5 * (values[:, None, None] * rel_t + bt[:, :, None] * scores[:, None, :])
        nxt = np.zeros((stride * (n - 1) + window, x.shape[0]))
        stop = stride * (n - 1) + 1
        for w in range(window):
            nxt[w : w + stop : stride] += contrib[:, w, :]
        scores = nxt
        values = tconv_forward(b, values, stride)
    return scores, values


def propagate_arrival_relevance(m: TartModel, x) -> list[RelevanceVector]:
    x = np.asarray(x, dtype=np.float64)
    scores, values = _arrival_relevance(m, x)
    return [RelevanceVector(s, float(v)) for s, v in zip(scores, values)]


def _leaf_relevance(m: TartModel, x, leaf_probs):
    """Per-leaf, per-class z+ relevance (N_D, C, K); constant leaves get zeros."""
    if m.leaf_net is None:
        return np.zeros(leaf_probs.shape + (x.shape[0],))
    return _zplus(m.leaf_net.layers[0].weights, x, leaf_probs)


def is_conserving(m: TartModel, x) -> bool:
    """True when every decision and leaf z+ denominator is positive at ``x``.

    Only then do the conservation factors hold exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = [m.decision_softmax_weights(d) for d in range(m.shape.depth)]
    if m.leaf_net is not None:
        weights.append(m.leaf_net.layers[0].weights)
    return all(np.all(np.maximum(w * x, 0.0).sum(axis=-1) > 0) for w in weights)


def _captured(weights, x):
    """1 where a z+ row has a positive denominator (its relevance sums to the output), else 0."""
    return (np.maximum(weights * x, 0.0).sum(axis=-1) > 0).astype(np.float64)


def captured_mass(m: TartModel, x, mode: str | None = None) -> np.ndarray:
    """Expected per-class sum of the report scores at ``x``.

    Runs the propagation on totals only, where a decision or leaf output whose
    z+ denominator vanishes contributes nothing. With every denominator positive
    this is the conservation factor times the prediction.
    """
    _require_linear_decisions(m)
    x = np.asarray(x, dtype=np.float64)
    mode = m.leaf_mode if mode is None else mode
    stride = m.shape.stride
    totals, values = np.zeros(1), np.ones(1)
    bs, _ = local_transitions(m, x)
    for d, b in enumerate(bs):
        kappa = _captured(m.decision_softmax_weights(d), x).T  # (W, N_d)
        contrib = 0.5 * (values * kappa * b + b * totals)
        totals = tconv_forward(contrib, np.ones(b.shape[1]), stride)
        values = tconv_forward(b, values, stride)
    leaf_probs = forward(m, x).leaf_probs[0]
    if m.leaf_net is None:
        kappa = np.zeros_like(leaf_probs)
    else:
        kappa = _captured(m.leaf_net.layers[0].weights, x)
    if m.shape.depth == 0:
        return kappa[0] * leaf_probs[0]
    if mode == "single":
        u = int(np.argmax(values))
        return 0.5 * (leaf_probs[u] * totals[u] + values[u] * kappa[u] * leaf_probs[u])
    return 0.5 * (totals @ leaf_probs + values @ (kappa * leaf_probs))


def _explain_lrp(m: TartModel, x, mode: str) -> RelevanceReport:
    if m.leaf_layers > 1:
        raise UnsupportedStructure(
            f"relevance propagation needs linear or constant leaves (L <= 1), got L = {m.leaf_layers}"
        )
    arr_scores, arrival = _arrival_relevance(m, x)
    cache = forward(m, x)
    leaf_probs = cache.leaf_probs[0]  # (N_D, C)
    leaf_rel = _leaf_relevance(m, x, leaf_probs)

    chosen = int(np.argmax(arrival)) if mode == "single" else None
    if m.shape.depth == 0:
        # No tree: the prediction is the lone leaf itself, not a product with p0.
        scores, values = leaf_rel[0], leaf_probs[0]
    elif mode == "single":
        u = chosen
        scores = 0.5 * (leaf_probs[u][:, None] * arr_scores[u] + arrival[u] * leaf_rel[u])
        values = arrival[u] * leaf_probs[u]
    else:
        scores = 0.5 * (
            np.einsum("uc,uk->ck", leaf_probs, arr_scores)
            + np.einsum("u,uck->ck", arrival, leaf_rel)
        )
        values = arrival @ leaf_probs
    prediction = leaf_probs[chosen] if mode == "single" else arrival @ leaf_probs
    return RelevanceReport(
        classes=[RelevanceVector(s, float(v)) for s, v in zip(scores, values)],
        leaves=[RelevanceVector(s, float(v)) for s, v in zip(arr_scores, arrival)],
        prediction=prediction,
        chosen_leaf=chosen,
        mode=mode,
        method="lrp",
    )


def _explain_gradient(m: TartModel, x, mode: str) -> RelevanceReport:
    # Every output's input gradient in one batched backward pass: one copy of
    # x per output, each seeded with its own cotangent.
    n_leaves, n_classes = m.n_leaves, m.class_count
    cache = forward(m, np.tile(x, (n_leaves, 1)))
    _, gx_leaves = backward(m, cache, grad_arrival=np.eye(n_leaves))
    arrival = cache.arrival[0]
    leaf_probs = cache.leaf_probs[0]

    cache = forward(m, np.tile(x, (n_classes, 1)))
    grad_leaf = np.zeros((n_classes, n_leaves, n_classes))
    chosen = None
    if mode == "single":
        chosen = int(np.argmax(arrival))
        grad_leaf[np.arange(n_classes), chosen, np.arange(n_classes)] = 1.0
        _, gx_classes = backward(m, cache, grad_leaf_probs=grad_leaf)
        prediction = leaf_probs[chosen]
    else:
        grad_leaf[np.arange(n_classes), :, np.arange(n_classes)] = arrival
        grad_arrival = leaf_probs.T  # row c: d y_c / d p_D = G[:, c]
        _, gx_classes = backward(m, cache, grad_arrival, grad_leaf)
        prediction = arrival @ leaf_probs
    return RelevanceReport(
        classes=[RelevanceVector(g * x, float(v)) for g, v in zip(gx_classes, prediction)],
        leaves=[RelevanceVector(g * x, float(v)) for g, v in zip(gx_leaves, arrival)],
        prediction=prediction,
        chosen_leaf=chosen,
        mode=mode,
        method="grad-x-input",
    )


def explain_prediction(m: TartModel, x, mode: str | None = None, fallback: str | None = None):
    """Relevance report for one example.

    Models with H > 1 or L > 1 raise ``UnsupportedStructure`` unless
    ``fallback="grad-x-input"``, which returns gradient-times-input scores
    (a heuristic without conservation guarantees).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.input_dim,):
        raise ValueError(f"expected one example with {m.input_dim} features")
    mode = m.leaf_mode if mode is None else mode
    if fallback is not None and fallback not in FALLBACKS:
        raise ValueError(f"unknown fallback {fallback!r}")
    try:
        return _explain_lrp(m, x, mode)
    except UnsupportedStructure:
        if fallback is None:
            raise
    return _explain_gradient(m, x, mode)


def class_mean_relevance(m: TartModel, data: Dataset, mode: str | None = None,
                         fallback: str | None = None):
    """Mean relevance of class c over the examples labeled c.

    Returns ``(matrix, empty)``: a (class_count, n_features) matrix and a
    boolean flag per class with no examples (its row is zero).
    """
    rows: list[list[np.ndarray]] = [[] for _ in range(m.class_count)]
    for x, c in zip(data.features, data.labels):
        rows[c].append(explain_prediction(m, x, mode, fallback).classes[c].scores)
    out = np.zeros((m.class_count, m.input_dim))
    empty = np.array([not r for r in rows])
    for c, r in enumerate(rows):
        if r:
            # fsum is exactly rounded, so the mean does not depend on row order
            stacked = np.stack(r)
            out[c] = [math.fsum(col) / len(r) for col in stacked.T]
    return out, empty
