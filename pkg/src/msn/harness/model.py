"""Token-wise residual block stack ending in a scalar click logit.

Input features are projected into ``tokens`` vectors of width ``d_model``.
Each layer updates every token residually, ``h <- h + block(h_tilde)``,
where ``block`` is an FFN or SMoE shared across tokens and ``h_tilde`` is
either ``h`` itself or, for MSN layers, ``h * g(memory(h))``. Memory query
networks and sub-keys are per token; the value table is shared by the tokens
of a layer unless ``per_token_values`` is set.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from ..baselines import (
    Ffn2,
    SmoeBlock,
    ffn_backward,
    ffn_forward,
    ffn_param_count,
    smoe_backward,
    smoe_forward,
)
from ..memory import (
    MemoryBlock,
    MemoryConfig,
    grad_memory_gate,
    memory_backward,
    memory_forward,
    memory_gate,
    memory_param_count,
)
from ..numerics import ContractError

BLOCK_TYPES = ("ffn", "smoe", "msn-ffn", "msn-smoe")


@dataclass
class ModelConfig:
    """Block-stack hyperparameters; defaults are the desk configuration.

    Memory values start at ``value_mean + value_std * N(0, 1)``: with a tanh
    gate a mean of 1 lets the gated input start near ``0.76 * h`` instead of
    a near-zero gate that would starve both the block and the memory of
    gradient.
    """

    d_in: int
    d_model: int = 32
    num_layers: int = 2
    block: str = "ffn"
    msn_layer_count: int = 0
    d_mid: int = 32
    n_experts: int = 4
    active_k: int = 2
    tokens: int = 1
    activation: str = "relu"
    n: int = 64 * 64
    k: int = 8
    d_key: int = 8
    weight_mode: str = "softmax"
    gating_fn: str = "tanh"
    over_param: bool = True
    layernorm_qk: bool = True
    ln_affine: bool = True
    per_token_values: bool = False
    value_std: float = 0.3
    value_mean: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.block not in ("ffn", "smoe"):
            raise ContractError(f"block must be 'ffn' or 'smoe', got {self.block!r}")
        if not 0 <= self.msn_layer_count <= self.num_layers:
            raise ContractError("msn_layer_count must lie in [0, num_layers]")
        if self.num_layers < 1 or self.tokens < 1 or self.d_model < 1 or self.d_mid < 1:
            raise ContractError("num_layers, tokens, d_model and d_mid must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ContractError(f"activation must be 'relu' or 'gelu', got {self.activation!r}")
        if self.block == "smoe" and not 1 <= self.active_k <= self.n_experts:
            raise ContractError("active_k must lie in [1, n_experts]")
        if self.msn_layer_count:
            self.memory_config()  # validates n, k, modes

    def layer_types(self) -> list:
        """The first ``msn_layer_count`` layers carry memory."""
        return [("msn-" if i < self.msn_layer_count else "") + self.block for i in range(self.num_layers)]

    def memory_config(self) -> MemoryConfig:
        return MemoryConfig(
            n=self.n, d_key=self.d_key, d_value=self.d_model, k=self.k, d_in=self.d_model,
            weight_mode=self.weight_mode, gating_fn=self.gating_fn, over_param=self.over_param,
            layernorm_qk=self.layernorm_qk, ln_affine=self.ln_affine,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class MemoryUnit:
    """Per-token memory blocks of one layer."""

    def __init__(self, cfg: MemoryConfig, tokens: int, per_token_values: bool, rng,
                 value_std: float, value_mean: float = 0.0):
        self.cfg = cfg
        self.per_token_values = per_token_values
        shared = None if per_token_values else rng.normal(value_mean, value_std, size=(cfg.n, cfg.d_value))
        self.blocks = [MemoryBlock.init(cfg, rng, value_std, value_mean, values=shared) for _ in range(tokens)]

    def parameters(self) -> dict:
        params = {}
        if not self.per_token_values:
            params["values"] = self.blocks[0].values
        for t, blk in enumerate(self.blocks):
            for name, arr in blk.parameters().items():
                if name == "values" and not self.per_token_values:
                    continue
                params[f"tok{t}.{name}"] = arr
        return params

    def grads_to_dict(self, per_token_grads) -> dict:
        out = {}
        if not self.per_token_values:
            out["values"] = sum(g.values for g in per_token_grads)
        for t, g in enumerate(per_token_grads):
            for name, arr in g.as_dict().items():
                if name == "values" and not self.per_token_values:
                    continue
                out[f"tok{t}.{name}"] = arr
        return out


class Layer:
    def __init__(self, kind: str, mcfg: ModelConfig, rng):
        self.kind = kind
        d = mcfg.d_model
        # small output scale keeps the residual stream near identity at init
        if kind.endswith("smoe"):
            self.inner = SmoeBlock.init(mcfg.n_experts, mcfg.active_k, d, mcfg.d_mid, d, rng,
                                        mcfg.activation, out_scale=0.5)
        else:
            self.inner = Ffn2.init(d, mcfg.d_mid, d, rng, mcfg.activation, out_scale=0.5)
        self.memory = None
        if kind.startswith("msn"):
            self.memory = MemoryUnit(mcfg.memory_config(), mcfg.tokens, mcfg.per_token_values,
                                     rng, mcfg.value_std, mcfg.value_mean)

    def parameters(self) -> dict:
        params = {f"inner.{k}": v for k, v in self.inner.parameters().items()}
        if self.memory is not None:
            params.update({f"mem.{k}": v for k, v in self.memory.parameters().items()})
        return params

    def forward(self, h):
        """``h`` is ``(B, T, d)``; returns the updated stream and a tape."""
        B, T, d = h.shape
        tape = {"h": h}
        if self.memory is not None:
            v_o = np.empty_like(h)
            mem_tapes = []
            for t, blk in enumerate(self.memory.blocks):
                v_t, _, mt = memory_forward(h[:, t, :], blk, self.memory.cfg)
                v_o[:, t, :] = v_t
                mem_tapes.append(mt)
            tape["v_o"], tape["mem"] = v_o, mem_tapes
            x_tilde = memory_gate(h, v_o, self.memory.cfg.gating_fn)
        else:
            x_tilde = h
        flat = x_tilde.reshape(B * T, d)
        if isinstance(self.inner, SmoeBlock):
            out, tape["inner"] = smoe_forward(flat, self.inner, return_tape=True)
        else:
            out, tape["inner"] = ffn_forward(flat, self.inner, return_tape=True)
        return h + out.reshape(B, T, d), tape

    def backward(self, tape, d_h_out):
        B, T, d = d_h_out.shape
        flat = d_h_out.reshape(B * T, d)
        if isinstance(self.inner, SmoeBlock):
            d_xt, g_inner = smoe_backward(tape["inner"], flat)
        else:
            d_xt, g_inner = ffn_backward(tape["inner"], flat)
        d_xt = d_xt.reshape(B, T, d)
        grads = {f"inner.{k}": v for k, v in g_inner.items()}
        d_h = d_h_out.copy()
        if self.memory is None:
            return d_h + d_xt, grads
        h, v_o = tape["h"], tape["v_o"]
        d_h_gate, d_v = grad_memory_gate(h, v_o, d_xt, self.memory.cfg.gating_fn)
        d_h += d_h_gate
        per_token = []
        for t, mt in enumerate(tape["mem"]):
            d_x_t, g_t = memory_backward(mt, d_v[:, t, :])
            d_h[:, t, :] += d_x_t
            per_token.append(g_t)
        grads.update({f"mem.{k}": v for k, v in self.memory.grads_to_dict(per_token).items()})
        return d_h, grads


@dataclass
class StackTape:
    x: np.ndarray
    layer_tapes: list
    h_final: np.ndarray


class BlockStack:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        width = cfg.tokens * cfg.d_model
        self.emb_w = rng.normal(0.0, cfg.d_in ** -0.5, size=(width, cfg.d_in))
        self.emb_b = np.zeros(width)
        self.layers = [Layer(kind, cfg, rng) for kind in cfg.layer_types()]
        self.ro_w = rng.normal(0.0, width ** -0.5, size=width)
        self.ro_b = np.zeros(1)

    @property
    def msn_layer_count(self) -> int:
        return sum(1 for l in self.layers if l.memory is not None)

    def parameters(self) -> dict:
        params = {"emb_w": self.emb_w, "emb_b": self.emb_b, "ro_w": self.ro_w, "ro_b": self.ro_b}
        for i, layer in enumerate(self.layers):
            params.update({f"layer{i}.{k}": v for k, v in layer.parameters().items()})
        return params

    def forward(self, x):
        """Logits ``(B,)`` and a tape for ``backward``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        h = (x @ self.emb_w.T + self.emb_b).reshape(B, self.cfg.tokens, self.cfg.d_model)
        tapes = []
        for layer in self.layers:
            h, t = layer.forward(h)
            tapes.append(t)
        logits = h.reshape(B, -1) @ self.ro_w + self.ro_b[0]
        return logits, StackTape(x, tapes, h)

    def predict(self, x, batch_size: int = 4096):
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)])

    def backward(self, tape: StackTape, d_logits) -> dict:
        d_logits = np.asarray(d_logits, dtype=np.float64)
        B = tape.x.shape[0]
        flat_h = tape.h_final.reshape(B, -1)
        grads = {"ro_w": flat_h.T @ d_logits, "ro_b": np.array([d_logits.sum()])}
        d_h = (d_logits[:, None] * self.ro_w).reshape(tape.h_final.shape)
        for i in reversed(range(len(self.layers))):
            d_h, g = self.layers[i].backward(tape.layer_tapes[i], d_h)
            grads.update({f"layer{i}.{k}": v for k, v in g.items()})
        d_emb = d_h.reshape(B, -1)
        grads["emb_w"] = d_emb.T @ tape.x
        grads["emb_b"] = d_emb.sum(axis=0)
        return grads

    @staticmethod
    def selections(tape: StackTape) -> list:
        """Per MSN layer, the ``(B, T, k)`` flat slot ids chosen in a forward pass."""
        out = []
        for lt in tape.layer_tapes:
            if "mem" in lt:
                out.append(np.stack([mt.result.flat_indices for mt in lt["mem"]], axis=1))
        return out

    def param_counts(self) -> dict:
        """Total / activated / memory parameter counts, from dims alone."""
        return param_counts(self.cfg)


def param_counts(cfg: ModelConfig) -> dict:
    """Parameter counts of the stack ``cfg`` describes, without building it.

    Memory value tables count toward ``total`` only; see ``memory_param_count``.
    """
    width = cfg.tokens * cfg.d_model
    total = activated = width * cfg.d_in + width + width + 1  # embedding + readout
    memory = 0
    ffn = ffn_param_count(cfg.d_model, cfg.d_mid, cfg.d_model)
    for kind in cfg.layer_types():
        if kind.endswith("smoe"):
            route = cfg.d_model * cfg.n_experts
            total += cfg.n_experts * ffn + route
            activated += cfg.active_k * ffn + route
        else:
            total += ffn
            activated += ffn
        if kind.startswith("msn"):
            m = memory_param_count(cfg.memory_config(), cfg.tokens, cfg.per_token_values)
            total += m["total"]
            activated += m["activated"]
            memory += m["total"]
    return {"total": total, "activated": activated, "memory": memory, "msn_param_ratio": memory / total}


def matched_dense_config(cfg: ModelConfig, tolerance: float = 0.02, max_width: int = 4096) -> ModelConfig:
    """The memory-free variant of ``cfg`` whose activated count best matches ``cfg``'s.

    Only ``d_mid`` changes. Raises ``ContractError`` if no width lands within
    ``tolerance`` (relative).
    """
    target = param_counts(cfg)["activated"]
    best = min(
        (replace(cfg, msn_layer_count=0, d_mid=w) for w in range(1, max_width + 1)),
        key=lambda c: abs(param_counts(c)["activated"] - target),
    )
    got = param_counts(best)["activated"]
    if abs(got - target) > tolerance * target:
        raise ContractError(f"no d_mid <= {max_width} matches {target} activated params within {tolerance:.0%}")
    return best
