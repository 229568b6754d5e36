"""Partial top-k against a full sort, and the fused gather with its backward."""
import numpy as np

from msn.kernels import (
    GatherPlan,
    benchmark_topk,
    fused_gather_backward,
    fused_gather_sum,
    partial_topk,
    scatter_rows,
)

rng = np.random.default_rng(1)

# ties go to the lower index
print(partial_topk([3.0, 5.0, 5.0, 1.0, 5.0], 2).indices)  # [1 2]

scores = rng.standard_normal(1024)
top = partial_topk(scores, 32)
print("same as sorting:", np.array_equal(top.indices, np.argsort(-scores, kind="stable")[:32]))

# 32 of 1024, timed against np.sort of everything
rec = benchmark_topk(1024, 32, repeats=500)
print(f"partial {rec['median_ns']:.0f} ns, full sort {rec['baseline_median_ns']:.0f} ns, oracle ok {rec['oracle_ok']}")

# gather k rows, weight them, and sum, in one pass
V = rng.standard_normal((4096, 8))
plan = GatherPlan(np.array([17, 4001, 256]), np.array([0.5, 0.3, 0.2]))
out = fused_gather_sum(plan, V)
print("matches two-pass:", np.allclose(out, (V[plan.indices] * plan.weights[:, None]).sum(0)))

# backward touches only the selected rows
d_out = rng.standard_normal(8)
idx, rows, d_w = fused_gather_backward(plan, V, d_out)
dV = scatter_rows(4096, idx, rows)
print("rows with gradient:", np.flatnonzero(np.abs(dV).sum(1)))
print("weight grads:", d_w.round(3))
