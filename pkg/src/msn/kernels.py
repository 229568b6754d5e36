"""Selection and sparse-gather kernels.

Tie rule used everywhere: among equal scores the lower candidate index ranks
first. ``partial_topk`` always returns exactly what the first ``k`` entries of
a stable descending sort would, without sorting all ``m`` candidates.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .numerics import ContractError


@dataclass
class TopKResult:
    indices: np.ndarray
    scores: np.ndarray


@dataclass
class GatherPlan:
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape:
            raise ContractError(
                f"plan indices {self.indices.shape} and weights {self.weights.shape} differ"
            )


def stable_topk_oracle(scores, k):
    """Reference: first ``k`` entries of a stable descending sort."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    return TopKResult(order, scores[order])


def partial_topk(scores, k: int) -> TopKResult:
    """Return the ``k`` largest entries of a 1-D score vector, in descending order.

    Selection is ``argpartition`` (introselect, O(m)) followed by a sort of
    the ``k`` winners only. Candidates tied with the k-th value are admitted
    lowest index first.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ContractError("partial_topk expects a 1-D score vector")
    m = s.shape[0]
    if not 1 <= k <= m:
        raise ContractError(f"k={k} out of range for {m} candidates")
    neg = -s
    if k == m:
        sel = np.arange(m)
    else:
        sel = np.argpartition(neg, k - 1)[:k]
        thr = neg[sel].max()
        n_tied = np.count_nonzero(neg == thr)
        if n_tied > 1 and n_tied != np.count_nonzero(neg[sel] == thr):
            # boundary tie: keep the strictly better ones, fill with lowest tied indices
            better = np.flatnonzero(neg < thr)
            tied = np.flatnonzero(neg == thr)[: k - better.size]
            sel = np.concatenate([better, tied])
    order = np.lexsort((sel, neg[sel]))
    sel = sel[order]
    return TopKResult(sel, s[sel])


def topk_rows(scores, k: int):
    """Row-wise ``partial_topk`` for a ``(B, m)`` score matrix.

    Returns ``(indices, values)``, both ``(B, k)``, each row ordered by
    descending score with lower index first on ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ContractError("topk_rows expects a 2-D score matrix")
    B, m = s.shape
    if not 1 <= k <= m:
        raise ContractError(f"k={k} out of range for {m} candidates")
    if k == m:
        sel = np.broadcast_to(np.arange(m), (B, m))
    else:
        thr = -np.partition(-s, k - 1, axis=1)[:, k - 1 : k]
        above = s > thr
        need = k - above.sum(axis=1, keepdims=True)
        tied = s == thr
        keep = above | (tied & (np.cumsum(tied, axis=1) <= need))
        # exactly k True per row; nonzero walks rows in ascending column order
        sel = np.nonzero(keep)[1].reshape(B, k)
    vals = np.take_along_axis(s, sel, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    sel = np.take_along_axis(sel, order, axis=1)
    return sel, np.take_along_axis(vals, order, axis=1)


def _check_plan(plan: GatherPlan, n_rows: int):
    if plan.indices.size and (plan.indices.min() < 0 or plan.indices.max() >= n_rows):
        raise ContractError(f"gather index out of bounds for table with {n_rows} rows")


def fused_gather_sum(plan: GatherPlan, values) -> np.ndarray:
    """Weighted sum of the planned rows of ``values``.

    Each selected row is read once and accumulated in plan order. A batched
    plan ``(B, k)`` yields ``(B, d)``.
    """
    _check_plan(plan, values.shape[0])
    idx, w = plan.indices, plan.weights
    acc = np.zeros(idx.shape[:-1] + (values.shape[1],))
    for t in range(idx.shape[-1]):
        acc = acc + w[..., t, None] * values[idx[..., t]]
    return acc


def fused_gather_backward(plan: GatherPlan, values, d_out):
    """Backward of ``fused_gather_sum`` in one pass over the gathered rows.

    Returns ``(row_indices, row_grads, d_weights)``: the sparse value gradient
    in scatter form (``row_grads[..., t, :]`` belongs to ``row_indices[..., t]``)
    and the gradient w.r.t. each weight. Duplicate indices across a batch are
    left for the caller to reduce (e.g. ``np.add.at``).
    """
    _check_plan(plan, values.shape[0])
    d_out = np.asarray(d_out, dtype=np.float64)
    idx, w = plan.indices, plan.weights
    k = idx.shape[-1]
    row_grads = np.empty(idx.shape + (values.shape[1],))
    d_weights = np.empty(idx.shape)
    for t in range(k):
        row = values[idx[..., t]]
        row_grads[..., t, :] = w[..., t, None] * d_out
        d_weights[..., t] = (row * d_out).sum(axis=-1)
    return idx, row_grads, d_weights


def scatter_rows(n_rows: int, row_indices, row_grads) -> np.ndarray:
    """Densify scatter-form gradients, summing duplicates in index order."""
    d = row_grads.shape[-1]
    dense = np.zeros((n_rows, d))
    np.add.at(dense, np.asarray(row_indices).reshape(-1), row_grads.reshape(-1, d))
    return dense


def _time_ns(fn, repeats):
    samples = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples[r] = time.perf_counter_ns() - t0
    return samples


def benchmark_topk(m: int = 1024, k: int = 32, repeats: int = 2000, seed: int = 0) -> dict:
    """Time ``partial_topk`` against a full stable argsort on the same input."""
    if not 1 <= k <= m:
        raise ContractError(f"k={k} out of range for m={m}")
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(m)
    got = partial_topk(scores, k)
    ref = stable_topk_oracle(scores, k)
    oracle_ok = bool(np.array_equal(got.indices, ref.indices))
    # warm both paths
    for _ in range(10):
        partial_topk(scores, k)
        np.argsort(-scores, kind="stable")[:k]
    ours = _time_ns(lambda: partial_topk(scores, k), repeats)
    base = _time_ns(lambda: np.argsort(-scores, kind="stable")[:k], repeats)
    return {
        "kernel": "topk",
        "m": m,
        "k": k,
        "median_ns": float(np.median(ours)),
        "p99_ns": float(np.percentile(ours, 99)),
        "baseline_median_ns": float(np.median(base)),
        "oracle_ok": oracle_ok,
    }


def benchmark_gather(m: int = 1024, k: int = 32, d: int = 64, repeats: int = 2000, seed: int = 0) -> dict:
    """Time ``fused_gather_sum`` against an unfused gather-then-reduce."""
    if not 1 <= k <= m:
        raise ContractError(f"k={k} out of range for m={m}")
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((m, d))
    plan = GatherPlan(rng.choice(m, size=k, replace=False), rng.random(k))

    def unfused():
        rows = values[plan.indices]
        return (rows * plan.weights[:, None]).sum(axis=0)

    oracle_ok = bool(np.allclose(fused_gather_sum(plan, values), unfused(), rtol=1e-12, atol=1e-12))
    ours = _time_ns(lambda: fused_gather_sum(plan, values), repeats)
    base = _time_ns(unfused, repeats)
    return {
        "kernel": "gather",
        "m": m,
        "k": k,
        "median_ns": float(np.median(ours)),
        "p99_ns": float(np.percentile(ours, 99)),
        "baseline_median_ns": float(np.median(base)),
        "oracle_ok": oracle_ok,
    }


def run_benchmarks(kernel: str, configs, repeats: int = 2000, seed: int = 0) -> list:
    """Run one benchmark per ``(m, k)`` config and return the JSON-ready records."""
    bench = {"topk": benchmark_topk, "gather": benchmark_gather}.get(kernel)
    if bench is None:
        raise ContractError(f"unknown kernel {kernel!r}; expected 'topk' or 'gather'")
    return [bench(m=m, k=k, repeats=repeats, seed=seed) for m, k in configs]


def write_benchmark_report(records, path) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2)
