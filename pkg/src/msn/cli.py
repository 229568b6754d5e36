"""Command-line entry point: ``msn {train,eval,ablate,bench,export-histogram}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, restore_into, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .harness.data import generate_dataset
from .harness.model import BlockStack
from .harness.train import MetricsLogger, activation_histogram, evaluate, train
from .numerics import ContractError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ABLATION_AXES = {
    "msn_layers": ("msn_layer_count", int),
    "memory_n": ("n", int),
    "topk": ("k", int),
    "gating_fn": ("gating_fn", str),
    "weight_mode": ("weight_mode", str),
    "per_token_values": ("per_token_values", bool),
}

log = logging.getLogger("msn")

def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError("--values", f"{raw!r} is not a boolean")
    if kind is int:
        try:
            if "^" in raw:
                base, exp = raw.split("^")
                return int(base) ** int(exp)
            return int(raw)
        except ValueError:
            raise ConfigError("--values", f"{raw!r} is not an integer") from None
    return raw

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if getattr(args, "out", None):
        cfg = cfg.replace("output", dir=str(args.out))
    if getattr(args, "strict", False):
        changes["strict_mode"] = True
    if changes:
        cfg = cfg.replace("train", **changes)
    return cfg

def _model_from_checkpoint(path):
    params, header = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(header["config"])
    model = BlockStack(cfg.model_config())
    restore_into(model.parameters(), params)
    return model, cfg

def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None):
    """Generate data, train, and return ``(model, result, eval_split)``."""
    train_ds, eval_ds = generate_dataset(cfg.data).split()
    model = BlockStack(cfg.model_config())
    logger = MetricsLogger(out_dir / cfg.output.metrics if out_dir else None)
    result = train(model, train_ds, cfg.train, eval_data=eval_ds if len(eval_ds) else None,
                   logger=logger, histogram_dir=out_dir)
    return model, result, eval_ds

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    model, result, _ = run_experiment(cfg, out)
    save_checkpoint(cfg.output.path("checkpoint"), model.parameters(), cfg.to_dict())
    if model.msn_layer_count:
        activation_histogram(model, generate_dataset(cfg.data)).to_csv(cfg.output.path("histogram"))
    final = result.log[-1] if result.log else {}
    print(json.dumps({"steps": result.steps, "qauc": final.get("qauc"), "auc": final.get("auc"),
                      "out": str(out)}))
    return EXIT_OK

def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output.path("checkpoint")
    model, _ = _model_from_checkpoint(ckpt)
    _, eval_ds = generate_dataset(cfg.data).split()
    if not len(eval_ds):
        raise ConfigError("data.eval_fraction", "evaluation split is empty")
    metrics = evaluate(model, eval_ds)
    metrics.update(model.param_counts())
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK

def cmd_export_histogram(args) -> int:
    cfg = _load_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output.path("checkpoint")
    model, _ = _model_from_checkpoint(ckpt)
    hist = activation_histogram(model, generate_dataset(cfg.data))
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    path = hist.to_csv(cfg.output.path("histogram"))
    print(json.dumps({"path": str(path), "coverage": hist.coverage().tolist(), "total": int(hist.counts.sum())}))
    return EXIT_OK

def ablate(cfg: ExperimentConfig, axis: str, values: list) -> list:
    """Train one model per value of ``axis``; rows carry QAUC deltas vs the first value."""
    if axis not in ABLATION_AXES:
        raise ConfigError("--axis", f"unknown axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    key, _ = ABLATION_AXES[axis]
    rows = []
    for value in values:
        variant = cfg.replace("model", **{key: value})
        model, result, _ = run_experiment(variant)
        counts = model.param_counts()
        rows.append({
            "variant": f"{axis}={value}",
            "qauc": result.log[-1]["qauc"],
            "total_params": counts["total"],
            "activated_params": counts["activated"],
            "msn_param_ratio": counts["msn_param_ratio"],
        })
    ref = rows[0]["qauc"]
    for r in rows:
        r["delta_qauc"] = 0.0 if r is rows[0] else r["qauc"] - ref
    return rows

def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.axis not in ABLATION_AXES:
        raise ConfigError("--axis", f"unknown axis {args.axis!r}; choose from {sorted(ABLATION_AXES)}")
    kind = ABLATION_AXES[args.axis][1]
    values = [_parse_value(v, kind) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values", "no values given")
    rows = ablate(cfg, args.axis, values)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{args.axis}.csv"
    cols = ["variant", "delta_qauc", "qauc", "total_params", "activated_params", "msn_param_ratio"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    print(path.read_text(), end="")
    return EXIT_OK

def cmd_bench(args) -> int:
    ms = [int(v) for v in str(args.m).split(",")]
    ks = [int(v) for v in str(args.k).split(",")]
    configs = [(m, k) for m in ms for k in ks]
    for m, k in configs:
        if not 1 <= k <= m:
            raise ConfigError("--k", f"k={k} out of range for m={m}")
    records = kernels.run_benchmarks(args.kernel, configs, repeats=args.repeats, seed=args.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        kernels.write_benchmark_report(records, out / f"bench_{args.kernel}.json")
    print(json.dumps(records, indent=2))
    if not all(r["oracle_ok"] for r in records):
        log.error("kernel output disagreed with its oracle")
        return EXIT_RUNTIME
    return EXIT_OK

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--strict", action="store_true", help="deterministic sample-ordered reductions")
        return sp

    with_config(sub.add_parser("train", help="train a model and write metrics, checkpoint, histogram")).set_defaults(fn=cmd_train)
    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the held-out split"))
    sp.add_argument("--checkpoint")
    sp.set_defaults(fn=cmd_eval)
    sp = with_config(sub.add_parser("ablate", help="train one model per value of an ablation axis"))
    sp.add_argument("--axis", required=True, help=", ".join(sorted(ABLATION_AXES)))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(fn=cmd_ablate)
    sp = with_config(sub.add_parser("export-histogram", help="write per-slot activation counts as CSV"))
    sp.add_argument("--checkpoint")
    sp.set_defaults(fn=cmd_export_histogram)
    sp = sub.add_parser("bench", help="benchmark a kernel against its baseline")
    sp.add_argument("kernel", choices=["topk", "gather"])
    sp.add_argument("--m", default="1024")
    sp.add_argument("--k", default="32")
    sp.add_argument("--repeats", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)
    return p

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, CheckpointError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
