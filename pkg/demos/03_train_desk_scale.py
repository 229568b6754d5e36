"""Train the desk MSN-FFN stack and a dense FFN with the same activated budget.

One seed of the acceptance setting; takes about a minute on a laptop CPU.
"""
import numpy as np

from msn.config import desk_config
from msn.harness import BlockStack, matched_dense_config, param_counts
from msn.harness.data import generate_dataset
from msn.harness.train import train

cfg = desk_config(0)
train_ds, eval_ds = generate_dataset(cfg.data).split()
print(len(train_ds), "training samples,", len(eval_ds), "held out")

msn_cfg = cfg.model_config()
ffn_cfg = matched_dense_config(msn_cfg)
for name, mc in (("msn-ffn", msn_cfg), ("ffn", ffn_cfg)):
    c = param_counts(mc)
    print(f"{name:8s} total {c['total']:7d}  activated {c['activated']:5d}  memory share {c['msn_param_ratio']:.2f}")

results = {}
for name, mc in (("msn-ffn", msn_cfg), ("ffn", ffn_cfg)):
    res = train(BlockStack(mc), train_ds, cfg.train, eval_data=eval_ds)
    results[name] = res
    for rec in res.log:
        cov = rec.get("slot_coverage")
        cov = "" if cov is None else "  coverage " + " ".join(f"{c:.2f}" for c in cov)
        print(f"{name:8s} step {rec['step']:4d}  loss {rec['loss']:.4f}  qauc {rec['qauc']:.4f}{cov}")

# how evenly are the slots used after training?
step, hist = results["msn-ffn"].histograms[-1]
counts = np.sort(hist.per_layer[0])[::-1]
print("layer 0: busiest slot", counts[0], "median", int(np.median(counts)), "unused", int((counts == 0).sum()))
