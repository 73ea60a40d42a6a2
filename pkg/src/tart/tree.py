"""Tree layers as column-stochastic transition matrices.

A layer with N_d nodes spreads its arrival probabilities to N_{d+1} children
through a W x N_d local transition matrix: column i holds the decision of node
i over its W children, which start at child index S*i. The fast path applies
this as a strided scatter-add (a transposed convolution) and never forms the
full N_{d+1} x N_d matrix. ``materialize_transition``/``naive_chain`` build it
explicitly and serve as the reference path.

All functions accept leading batch axes: ``b`` of shape (..., W, N_d) and ``p``
of shape (..., N_d), one independent instance per batch entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TreeShape:
    window: int
    stride: int
    depth: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.stride > self.window:
            raise ValueError("stride must not exceed window")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")

    @property
    def widths(self) -> list[int]:
        return layer_widths(self)

    @property
    def n_leaves(self) -> int:
        return self.widths[-1]


def layer_widths(shape: TreeShape) -> list[int]:
    widths = [1]
    for _ in range(shape.depth):
        widths.append(shape.stride * (widths[-1] - 1) + shape.window)
    return widths


def next_width(n: int, window: int, stride: int) -> int:
    return stride * (n - 1) + window


def _check(b, p, stride):
    if stride < 1 or stride > b.shape[-2]:
        raise ValueError(f"stride {stride} inconsistent with window {b.shape[-2]}")
    if p.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"p has {p.shape[-1]} entries but b has {b.shape[-1]} columns"
        )


def tconv_forward(b, p, stride: int):
    """Spread arrival probabilities ``p`` to the next layer without building T."""
    b = np.asarray(b, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check(b, p, stride)
    window, n = b.shape[-2], b.shape[-1]
    batch = np.broadcast_shapes(b.shape[:-2], p.shape[:-1])
    out = np.zeros(batch + (next_width(n, window, stride),))
    stop = stride * (n - 1) + 1
    for w in range(window):
        out[..., w : w + stop : stride] += p * b[..., w, :]
    return out


def tconv_backward(b, p, stride: int, grad_out):
    """Adjoint of ``tconv_forward`` in both arguments.

    grad_b[w, i] = p[i] * grad_out[S*i + w]
    grad_p[i]    = sum_w b[w, i] * grad_out[S*i + w]
    """
    b = np.asarray(b, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check(b, p, stride)
    window, n = b.shape[-2], b.shape[-1]
    if grad_out.shape[-1] != next_width(n, window, stride):
        raise ValueError(
            f"grad_out has {grad_out.shape[-1]} entries, expected "
            f"{next_width(n, window, stride)}"
        )
    stop = stride * (n - 1) + 1
    gathered = np.stack(
        [grad_out[..., w : w + stop : stride] for w in range(window)], axis=-2
    )
    grad_b = gathered * p[..., None, :]
    grad_p = np.sum(b * gathered, axis=-2)
    return grad_b, grad_p


def materialize_transition(b, stride: int):
    """Full N_{d+1} x N_d transition matrix with column i of ``b`` at rows [S*i, S*i+W)."""
    b = np.asarray(b, dtype=np.float64)
    window, n = b.shape[-2], b.shape[-1]
    if stride < 1 or stride > window:
        raise ValueError(f"stride {stride} inconsistent with window {window}")
    t = np.zeros(b.shape[:-2] + (next_width(n, window, stride), n))
    cols = np.arange(n)
    for w in range(window):
        t[..., stride * cols + w, cols] = b[..., w, :]
    return t


def naive_chain(transitions, p0=None):
    """Dense product T_{D-1} ... T_0 p0, one matrix-vector product per layer."""
    p = np.ones(1) if p0 is None else np.asarray(p0, dtype=np.float64)
    for k, t in enumerate(transitions):
        if t.shape[-1] != p.shape[-1]:
            raise ValueError(
                f"transition {k} has {t.shape[-1]} columns but p has {p.shape[-1]} entries"
            )
        p = np.einsum("...ji,...i->...j", t, p)
    return p


def tconv_chain(local_transitions, stride: int, p0=None):
    p = np.ones(1) if p0 is None else np.asarray(p0, dtype=np.float64)
    for b in local_transitions:
        p = tconv_forward(b, p, stride)
    return p
