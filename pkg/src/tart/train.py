"""Arrival-weighted ensemble loss, Adam and the mini-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import TartModel, backward, forward, predict
from .nn import CLAMP_EPS

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


@dataclass
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 100
    seed: int = 0
    shuffle: bool = True
    lr: float = 0.005

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class LossCache:
    forward: object
    labels: np.ndarray
    leaf_losses: np.ndarray  # (n, N_D)
    vector_input: bool


def ensemble_loss(m: TartModel, x, label, rng: np.random.Generator | None = None):
    """Sum over leaves of p_D(u) * cross_entropy(leaf u, label).

    ``x`` may be one example (with an integer label) or a batch (with a label
    vector), in which case the mean over the batch is returned.
    """
    cache = forward(m, x, rng)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n = cache.x.shape[0]
    if labels.shape != (n,):
        raise ValueError("one label per example is required")
    if labels.min() < 0 or labels.max() >= m.class_count:
        raise ValueError(f"labels must lie in [0, {m.class_count})")
    picked = cache.leaf_probs[np.arange(n), :, labels]  # (n, N_D)
    leaf_losses = -np.log(np.maximum(picked, CLAMP_EPS))
    per_example = np.sum(cache.arrival * leaf_losses, axis=1)
    loss = float(per_example[0]) if cache.vector_input else float(per_example.mean())
    return loss, LossCache(cache, labels, leaf_losses, cache.vector_input)


def backward_full(m: TartModel, caches: LossCache, label=None, with_input: bool = False):
    """Exact gradient of ``ensemble_loss`` for every parameter of ``m``."""
    fc = caches.forward
    if label is not None and not np.array_equal(np.atleast_1d(label), caches.labels):
        raise ValueError("labels do not match the cached forward pass")
    n = fc.x.shape[0]
    if fc.vector_input:
        scale = 1.0
    else:
        scale = 1.0 / n
    grad_arrival = scale * caches.leaf_losses
    picked = fc.leaf_probs[np.arange(n), :, caches.labels]
    grad_leaf = np.zeros(fc.leaf_probs.shape)
    active = picked > CLAMP_EPS
    grad_leaf[np.arange(n), :, caches.labels] = np.where(
        active, -scale * fc.arrival / np.where(active, picked, 1.0), 0.0
    )
    grads, grad_x = backward(m, fc, grad_arrival, grad_leaf)
    if with_input:
        return grads, grad_x[0] if fc.vector_input else grad_x
    return grads


def adam_init(params, lr: float = 0.005) -> AdamState:
    return AdamState(
        lr=lr,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state disagree in length")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m1, m2 in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m1.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m1 *= state.beta1
        m1 += (1.0 - state.beta1) * g
        m2 *= state.beta2
        m2 += (1.0 - state.beta2) * g * g
        p -= state.lr * (m1 / c1) / (np.sqrt(m2 / c2) + state.eps)
    return params


def fit(m: TartModel, train: Dataset, cfg: TrainConfig):
    """Train ``m`` in place; returns the model and the mean batch loss of each epoch."""
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    if train.n_features != m.input_dim:
        raise ValueError(
            f"dataset has {train.n_features} features, model expects {m.input_dim}"
        )
    if train.class_count > m.class_count:
        raise ValueError("dataset has more classes than the model")

    rng = np.random.default_rng(cfg.seed)
    params = m.parameters()
    state = adam_init(params, cfg.lr)
    history = []
    n = len(train)
    m.set_mode("train")
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n) if cfg.shuffle else np.arange(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss, cache = ensemble_loss(m, train.features[idx], train.labels[idx], rng)
                adam_step(state, params, backward_full(m, cache))
                losses.append(loss)
            history.append(float(np.mean(losses)))
            log.debug("epoch %d loss %.6f", epoch + 1, history[-1])
    finally:
        m.set_mode("infer")
    return m, history


def evaluate_accuracy(m: TartModel, data: Dataset, mode: str | None = None) -> float:
    if data.n_features != m.input_dim:
        raise ValueError(
            f"dataset has {data.n_features} features, model expects {m.input_dim}"
        )
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict(m, data.features, mode)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


def write_loss_history(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch mean_loss\n")
        for k, loss in enumerate(history, start=1):
            fh.write(f"{k} {loss:.17g}\n")
