"""Analytic per-sample operation counts (one multiply-add = 2 ops)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..baselines import SmoeBlock, ffn_macs
from ..memory import MemoryConfig


@dataclass
class BlockFlops:
    kind: str
    scoring: int = 0
    combination: int = 0
    gather: int = 0
    dense: int = 0

    @property
    def total(self) -> int:
        return self.scoring + self.combination + self.gather + self.dense


@dataclass
class FlopsReport:
    blocks: list = field(default_factory=list)
    flat_scan_scoring: int = 0

    def total(self, category: str | None = None) -> int:
        if category is None:
            return sum(b.total for b in self.blocks)
        return sum(getattr(b, category) for b in self.blocks)

    def to_dict(self) -> dict:
        return {
            "blocks": [dict(asdict(b), total=b.total) for b in self.blocks],
            "totals": {c: self.total(c) for c in ("scoring", "combination", "gather", "dense")},
            "total": self.total(),
            "flat_scan_scoring": self.flat_scan_scoring,
        }


def memory_scoring_flops(cfg: MemoryConfig) -> int:
    """Both subspaces: ``2 * (2 * sqrt_n * d_key)``."""
    return 2 * (2 * cfg.sqrt_n * cfg.d_key)


def flat_scan_flops(cfg: MemoryConfig) -> int:
    """Scoring every slot against one full-width key: ``2 * n * d_key``."""
    return 2 * cfg.n * cfg.d_key


def memory_flops(cfg: MemoryConfig) -> BlockFlops:
    """Per-sample counts for one memory read plus its gate.

    Selection comparisons are not counted; the ``k * k`` candidate sums are.
    Key LayerNorm and the theta transform depend only on the parameters, so
    they are amortized per batch and excluded here.
    """
    return BlockFlops(
        kind="memory",
        scoring=memory_scoring_flops(cfg),
        combination=cfg.k * cfg.k,
        gather=2 * cfg.k * cfg.d_value,
        dense=2 * cfg.d_in * 2 * cfg.d_key + cfg.d_value,  # query net + gate multiply
    )


def count_flops(model) -> FlopsReport:
    """Per-sample analytic counts for a ``BlockStack``."""
    cfg = model.cfg
    T, d = cfg.tokens, cfg.d_model
    report = FlopsReport()
    report.blocks.append(BlockFlops("embed", dense=2 * cfg.d_in * T * d))
    for layer in model.layers:
        if isinstance(layer.inner, SmoeBlock):
            e = layer.inner.experts[0]
            dense = 2 * (d * len(layer.inner.experts) + layer.inner.active_k * ffn_macs(e.d_in, e.d_mid, e.d_out))
        else:
            f = layer.inner
            dense = 2 * ffn_macs(f.d_in, f.d_mid, f.d_out)
        block = BlockFlops(layer.kind, dense=T * dense)
        if layer.memory is not None:
            m = memory_flops(layer.memory.cfg)
            block.scoring = T * m.scoring
            block.combination = T * m.combination
            block.gather = T * m.gather
            block.dense += T * m.dense
            report.flat_scan_scoring += T * flat_scan_flops(layer.memory.cfg)
        report.blocks.append(block)
    report.blocks.append(BlockFlops("readout", dense=2 * T * d))
    return report
