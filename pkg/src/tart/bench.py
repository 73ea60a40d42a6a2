"""Batched inference timing: strided TConv spreading vs dense transition matrices."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import TartModel, build_model, forward, leaf_predictions, local_transitions
from .tree import TreeShape, materialize_transition


@dataclass
class BenchRow:
    depth: int
    path: str
    nodes: int
    seconds: float
    speedup: float


def tconv_inference(m: TartModel, x):
    cache = forward(m, x)
    return np.einsum("nu,nuc->nc", cache.arrival, cache.leaf_probs)


DENSE_BUDGET = 1 << 25  # bytes of dense transition matrices held at once


def naive_inference(m: TartModel, x, budget: int = DENSE_BUDGET):
    """Dense matrix chain: every T_d is built in full for every example.

    Examples are processed in chunks sized so the largest stack of dense
    matrices stays within ``budget`` bytes.
    """
    bs, _ = local_transitions(m, x)
    leaf_probs = leaf_predictions(m, x)
    n = x.shape[0]
    widths = m.widths
    largest = max((a * b for a, b in zip(widths[1:], widths[:-1])), default=1)
    chunk = max(1, budget // (8 * largest))
    out = np.empty((n, m.class_count))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        p = np.ones((min(chunk, n - start), 1))
        for b in bs:
            t = materialize_transition(b[sl], m.shape.stride)
            p = (t @ p[:, :, None])[:, :, 0]
        out[sl] = np.einsum("ku,kuc->kc", p, leaf_probs[sl])
    return out


def _chunked(fn, m, x, jobs):
    if jobs <= 1:
        return fn(m, x)
    parts = np.array_split(x, jobs)
    with ThreadPoolExecutor(jobs) as pool:
        return np.concatenate(list(pool.map(lambda part: fn(m, part), parts)))


def median_time(fn, repeats: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def benchmark_model(depth: int, features: int, classes: int, seed: int,
                    window: int = 2, stride: int = 2) -> TartModel:
    # Soft decision tree layout: linear decisions, constant leaves.
    rng = np.random.default_rng(seed)
    m = build_model(TreeShape(window, stride, depth), 1, 0, features, classes, rng=rng)
    m.leaf_logits[:] = rng.normal(size=m.leaf_logits.shape)
    return m


def run_benchmark(depths, batch: int = 1024, features: int = 16, classes: int = 10,
                  repeats: int = 5, seed: int = 0, jobs: int = 1, tol: float = 1e-12):
    """Time both inference paths at each depth after checking they agree within ``tol``."""
    if repeats < 1 or batch < 1:
        raise ValueError("repeats and batch must be positive")
    rows = []
    for depth in depths:
        m = benchmark_model(depth, features, classes, seed)
        x = np.random.default_rng(seed + 1).normal(size=(batch, features))
        fast = _chunked(tconv_inference, m, x, jobs)
        slow = _chunked(naive_inference, m, x, jobs)
        err = float(np.max(np.abs(fast - slow)))
        if err > tol:
            raise AssertionError(f"depth {depth}: paths disagree by {err:.3g}")
        t_fast = median_time(lambda: _chunked(tconv_inference, m, x, jobs), repeats)
        t_slow = median_time(lambda: _chunked(naive_inference, m, x, jobs), repeats)
        nodes = sum(m.widths)
        rows.append(BenchRow(depth, "tconv", nodes, t_fast, t_slow / t_fast))
        rows.append(BenchRow(depth, "naive", nodes, t_slow, t_slow / t_fast))
    return rows


def write_rows(rows, fh) -> None:
    fh.write("depth,path,nodes,seconds,speedup\n")
    for r in rows:
        fh.write(f"{r.depth},{r.path},{r.nodes},{r.seconds:.17g},{r.speedup:.17g}\n")
