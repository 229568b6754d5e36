"""Walk through one memory read: scores, selection, weights, gate."""
import numpy as np

from msn.memory import (
    MemoryBlock,
    MemoryConfig,
    combine_topk,
    effective_keys,
    flat_index,
    memory_forward,
    memory_gate,
)

rng = np.random.default_rng(0)

# 64 x 64 = 4096 slots, addressed by a (row, col) pair of sub-keys
cfg = MemoryConfig(n=64 * 64, d_key=8, d_value=16, k=4, d_in=16)
block = MemoryBlock.init(cfg, rng)
print("value table", block.values.shape, "row keys", block.key_row.shape)

x = rng.standard_normal(16)
v_o, res, tape = memory_forward(x, block, cfg)

# each half of the query scores only 64 sub-keys
S_row = (tape.q_row @ tape.eff_row.T)[0]
S_col = (tape.q_col @ tape.eff_col.T)[0]
print("scores per half:", S_row.shape, S_col.shape)

# the best k pairs out of all 4096 sums, found from the k x k candidates
for i, j, s in combine_topk(S_row, S_col, cfg.k):
    print(f"  row {i:2d} col {j:2d} -> slot {flat_index(i, j, cfg.sqrt_n):4d}  score {s:+.3f}")

# brute force over the whole grid agrees
grid = (S_row[:, None] + S_col[None, :]).reshape(-1)
print("brute force slots:", np.argsort(-grid, kind="stable")[: cfg.k])
print("selected slots:   ", res.flat_indices)

print("softmax weights:", np.round(res.weights, 3), "sum", res.weights.sum())

# the retrieved vector modulates the input elementwise
gated = memory_gate(x, v_o, "tanh")
print("gate range:", np.tanh(v_o).min().round(3), np.tanh(v_o).max().round(3))
print("gated input[:4]:", gated[:4].round(3))

# theta starts at identity; a perturbed theta moves every effective key at once
before = effective_keys(block, cfg, "row")
block.theta_row += 0.01 * rng.standard_normal((8, 8))
moved = np.linalg.norm(effective_keys(block, cfg, "row") - before, axis=1)
print("keys moved by theta:", int((moved > 0).sum()), "of", cfg.sqrt_n)
