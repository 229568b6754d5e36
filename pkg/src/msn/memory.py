"""Product-key memory with over-parameterized sub-keys and memory-gated fusion.

A memory of ``n = sqrt_n**2`` value rows is addressed by pairs ``(i, j)`` of
row/column sub-keys. A query network maps the input to one query per
subspace; each subspace is scored independently, the top-k of each are
crossed, and the best k pairs are read from the value table and averaged.

All functions accept a single input vector ``(d,)`` or a batch ``(B, d)``;
results keep the caller's leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .kernels import GatherPlan, fused_gather_backward, fused_gather_sum, scatter_rows, topk_rows
from .numerics import (
    DEFAULT_LN_EPS,
    ContractError,
    LayerNormParams,
    grad_layernorm,
    layernorm,
    linear,
)

WEIGHT_MODES = ("softmax", "linear")
GATING_FNS = ("tanh", "sigmoid", "identity")
LINEAR_NORM_MIN = 1e-12


class DegenerateNormalizationError(ArithmeticError):
    """Linear weight normalization hit a near-zero score sum."""


@dataclass
class MemoryConfig:
    n: int
    d_key: int
    d_value: int
    k: int
    d_in: int | None = None
    weight_mode: str = "softmax"
    gating_fn: str = "tanh"
    over_param: bool = True
    layernorm_qk: bool = True
    ln_affine: bool = True
    ln_eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        if self.d_in is None:
            self.d_in = self.d_value
        root = int(round(self.n ** 0.5))
        if self.n < 1 or root * root != self.n:
            raise ContractError(f"memory size n={self.n} is not a perfect square")
        if not 1 <= self.k <= root:
            raise ContractError(f"k={self.k} must lie in [1, sqrt_n={root}]")
        if self.d_key <= 0 or self.d_value <= 0 or self.d_in <= 0:
            raise ContractError("d_key, d_value and d_in must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ContractError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.gating_fn not in GATING_FNS:
            raise ContractError(f"gating_fn must be one of {GATING_FNS}")

    @property
    def sqrt_n(self) -> int:
        return int(round(self.n ** 0.5))


@dataclass
class MemoryBlock:
    values: np.ndarray  # (n, d_value)
    key_row: np.ndarray  # (sqrt_n, d_key)
    key_col: np.ndarray
    theta_row: np.ndarray  # (d_key, d_key), applied to each key vector
    theta_col: np.ndarray
    query_w: np.ndarray  # (2 * d_key, d_in); rows [:d_key] give q_row
    query_b: np.ndarray
    ln_q: LayerNormParams
    ln_k: LayerNormParams

    @classmethod
    def init(cls, cfg: MemoryConfig, rng: np.random.Generator, value_std: float = 1.0,
             value_mean: float = 0.0, values: np.ndarray | None = None):
        """Random init; theta starts at identity. Pass ``values`` to share a table."""
        s, dk = cfg.sqrt_n, cfg.d_key
        if values is None:
            values = rng.normal(value_mean, value_std, size=(cfg.n, cfg.d_value))
        return cls(
            values=values,
            key_row=rng.normal(0.0, dk ** -0.5, size=(s, dk)),
            key_col=rng.normal(0.0, dk ** -0.5, size=(s, dk)),
            theta_row=np.eye(dk),
            theta_col=np.eye(dk),
            query_w=rng.normal(0.0, cfg.d_in ** -0.5, size=(2 * dk, cfg.d_in)),
            query_b=np.zeros(2 * dk),
            ln_q=LayerNormParams.identity(dk, cfg.ln_eps, cfg.ln_affine),
            ln_k=LayerNormParams.identity(dk, cfg.ln_eps, cfg.ln_affine),
        )

    def parameters(self) -> dict:
        """Name -> array views. Updating these in place updates the block."""
        return {
            "values": self.values,
            "key_row": self.key_row,
            "key_col": self.key_col,
            "theta_row": self.theta_row,
            "theta_col": self.theta_col,
            "query_w": self.query_w,
            "query_b": self.query_b,
            "ln_q_gamma": self.ln_q.gamma,
            "ln_q_beta": self.ln_q.beta,
            "ln_k_gamma": self.ln_k.gamma,
            "ln_k_beta": self.ln_k.beta,
        }

    def check(self, cfg: MemoryConfig):
        s, dk = cfg.sqrt_n, cfg.d_key
        expected = {
            "values": (cfg.n, cfg.d_value),
            "key_row": (s, dk),
            "key_col": (s, dk),
            "theta_row": (dk, dk),
            "theta_col": (dk, dk),
            "query_w": (2 * dk, cfg.d_in),
            "query_b": (2 * dk,),
            "ln_q_gamma": (dk,),
            "ln_q_beta": (dk,),
            "ln_k_gamma": (dk,),
            "ln_k_beta": (dk,),
        }
        for name, arr in self.parameters().items():
            if arr.shape != expected[name]:
                raise ContractError(f"{name} has shape {arr.shape}, expected {expected[name]}")


@dataclass
class MemoryGradients:
    values: np.ndarray
    key_row: np.ndarray
    key_col: np.ndarray
    theta_row: np.ndarray
    theta_col: np.ndarray
    query_w: np.ndarray
    query_b: np.ndarray
    ln_q_gamma: np.ndarray
    ln_q_beta: np.ndarray
    ln_k_gamma: np.ndarray
    ln_k_beta: np.ndarray

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RetrievalResult:
    rows: np.ndarray
    cols: np.ndarray
    flat_indices: np.ndarray
    raw_scores: np.ndarray
    weights: np.ndarray

    @property
    def pairs(self):
        if self.rows.ndim != 1:
            raise ValueError("pairs is only defined for a single sample")
        return list(zip(self.rows.tolist(), self.cols.tolist()))


# -- query and key scoring ---------------------------------------------------

def _split_queries(x, block, cfg):
    z = linear(x, block.query_w, block.query_b)
    dk = cfg.d_key
    q_row, q_col = z[:, :dk], z[:, dk:]
    caches = (None, None)
    if cfg.layernorm_qk:
        q_row, c_row = layernorm(q_row, block.ln_q, return_cache=True)
        q_col, c_col = layernorm(q_col, block.ln_q, return_cache=True)
        caches = (c_row, c_col)
    return q_row, q_col, caches


def query_split(x_in, block: MemoryBlock, cfg: MemoryConfig):
    """Map the input to ``(q_row, q_col)``, each of dim ``d_key``."""
    x = np.asarray(x_in, dtype=np.float64)
    if x.shape[-1] != block.query_w.shape[1]:
        raise ContractError(f"x_in has dim {x.shape[-1]}, query net expects {block.query_w.shape[1]}")
    q_row, q_col, _ = _split_queries(np.atleast_2d(x), block, cfg)
    if x.ndim == 1:
        return q_row[0], q_col[0]
    return q_row, q_col


def _effective_keys(keys, theta, over_param, ln_k):
    ln_cache = None
    normed = keys
    if ln_k is not None:
        normed, ln_cache = layernorm(keys, ln_k, return_cache=True)
    eff = normed @ theta.T if over_param else normed
    return eff, normed, ln_cache


def effective_keys(block: MemoryBlock, cfg: MemoryConfig, side: str = "row") -> np.ndarray:
    """The key vectors actually used for scoring (after LayerNorm and theta)."""
    keys, theta = (block.key_row, block.theta_row) if side == "row" else (block.key_col, block.theta_col)
    ln = block.ln_k if cfg.layernorm_qk else None
    return _effective_keys(keys, theta, cfg.over_param, ln)[0]


def score_subkeys(q, keys, theta, over_param: bool, layernorm_qk: bool,
                  ln_k: LayerNormParams | None = None) -> np.ndarray:
    """Dot-product scores of one query (or a batch) against one sub-key table."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if keys.ndim != 2 or q.shape[-1] != keys.shape[1]:
        raise ContractError(f"query dim {q.shape[-1]} does not match keys {keys.shape}")
    if theta.shape != (keys.shape[1], keys.shape[1]):
        raise ContractError(f"theta must be ({keys.shape[1]}, {keys.shape[1]}), got {theta.shape}")
    if layernorm_qk and ln_k is None:
        ln_k = LayerNormParams.identity(keys.shape[1])
    eff, _, _ = _effective_keys(keys, theta, over_param, ln_k if layernorm_qk else None)
    return q @ eff.T


# -- selection ---------------------------------------------------------------

def _combine(S_row, S_col, k):
    """Batched product-key selection: ``(rows, cols, scores)`` each ``(B, k)``."""
    B, s = S_row.shape
    if S_col.shape != (B, s):
        raise ContractError("S_row and S_col must have the same shape")
    if not 1 <= k <= s:
        raise ContractError(f"k={k} must lie in [1, sqrt_n={s}]")
    I, _ = topk_rows(S_row, k)
    J, _ = topk_rows(S_col, k)
    # ascending I, J make grid position order equal lexicographic (i, j) order
    I = np.sort(I, axis=1)
    J = np.sort(J, axis=1)
    grid = np.take_along_axis(S_row, I, 1)[:, :, None] + np.take_along_axis(S_col, J, 1)[:, None, :]
    pos, scores = topk_rows(grid.reshape(B, k * k), k)
    rows = np.take_along_axis(I, pos // k, 1)
    cols = np.take_along_axis(J, pos % k, 1)
    return rows, cols, scores


def combine_topk(S_row, S_col, k: int):
    """Top-k ``(i, j, S_row[i] + S_col[j])`` triples, best first.

    Candidates are restricted to the per-subspace top-k sets. Ties rank the
    lower index first within a subspace and the lexicographically smaller
    pair first among pairs.
    """
    S_row = np.asarray(S_row, dtype=np.float64)
    S_col = np.asarray(S_col, dtype=np.float64)
    if S_row.ndim != 1 or S_col.ndim != 1:
        raise ContractError("combine_topk expects 1-D score vectors; use _combine for batches")
    rows, cols, scores = _combine(S_row[None], S_col[None], k)
    return [(int(i), int(j), float(v)) for i, j, v in zip(rows[0], cols[0], scores[0])]


def flat_index(i, j, sqrt_n: int):
    """Row-major slot id ``sqrt_n * i + j``; inverse is ``divmod(flat, sqrt_n)``."""
    i_arr, j_arr = np.asarray(i), np.asarray(j)
    if np.any(i_arr < 0) or np.any(i_arr >= sqrt_n) or np.any(j_arr < 0) or np.any(j_arr >= sqrt_n):
        raise ContractError(f"sub-index out of range for sqrt_n={sqrt_n}")
    out = sqrt_n * i_arr + j_arr
    return int(out) if out.ndim == 0 else out


def selection_weights(scores, weight_mode: str = "softmax") -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if weight_mode == "softmax":
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    if weight_mode == "linear":
        total = scores.sum(axis=-1, keepdims=True)
        if np.any(np.abs(total) < LINEAR_NORM_MIN):
            raise DegenerateNormalizationError("selected scores sum to ~0; linear weights undefined")
        return scores / total
    raise ContractError(f"unknown weight_mode {weight_mode!r}")


def _grad_weights(scores, weights, d_weights, weight_mode):
    inner = (weights * d_weights).sum(axis=-1, keepdims=True)
    if weight_mode == "softmax":
        return weights * (d_weights - inner)
    return (d_weights - inner) / scores.sum(axis=-1, keepdims=True)


def aggregate_values(pairs, values, weight_mode: str = "softmax", sqrt_n: int | None = None):
    """Weighted sum of the value rows addressed by ``combine_topk`` output.

    Returns ``(v_o, RetrievalResult)``.
    """
    if not pairs:
        raise ContractError("aggregate_values needs at least one pair")
    values = np.asarray(values, dtype=np.float64)
    if sqrt_n is None:
        sqrt_n = int(round(values.shape[0] ** 0.5))
    rows = np.array([p[0] for p in pairs], dtype=np.int64)
    cols = np.array([p[1] for p in pairs], dtype=np.int64)
    scores = np.array([p[2] for p in pairs], dtype=np.float64)
    flat = flat_index(rows, cols, sqrt_n)
    weights = selection_weights(scores, weight_mode)
    v_o = fused_gather_sum(GatherPlan(flat, weights), values)
    return v_o, RetrievalResult(rows, cols, flat, scores, weights)


# -- full layer --------------------------------------------------------------

@dataclass
class MemoryTape:
    block: MemoryBlock = field(repr=False)
    cfg: MemoryConfig
    x: np.ndarray
    q_row: np.ndarray
    q_col: np.ndarray
    q_caches: tuple
    eff_row: np.ndarray
    eff_col: np.ndarray
    normed_row: np.ndarray
    normed_col: np.ndarray
    k_caches: tuple
    result: RetrievalResult
    squeeze: bool


def memory_forward(x_in, block: MemoryBlock, cfg: MemoryConfig):
    """Retrieve and aggregate memory values for ``x_in``.

    Returns ``(v_o, RetrievalResult, tape)``; the tape feeds ``memory_backward``.
    """
    x = np.asarray(x_in, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != cfg.d_in:
        raise ContractError(f"x_in has dim {x.shape[1]}, expected d_in={cfg.d_in}")
    q_row, q_col, q_caches = _split_queries(x, block, cfg)
    ln_k = block.ln_k if cfg.layernorm_qk else None
    eff_row, normed_row, c_row = _effective_keys(block.key_row, block.theta_row, cfg.over_param, ln_k)
    eff_col, normed_col, c_col = _effective_keys(block.key_col, block.theta_col, cfg.over_param, ln_k)
    S_row = q_row @ eff_row.T
    S_col = q_col @ eff_col.T
    rows, cols, scores = _combine(S_row, S_col, cfg.k)
    flat = cfg.sqrt_n * rows + cols
    weights = selection_weights(scores, cfg.weight_mode)
    v_o = fused_gather_sum(GatherPlan(flat, weights), block.values)
    result = RetrievalResult(rows, cols, flat, scores, weights)
    tape = MemoryTape(block, cfg, x, q_row, q_col, q_caches, eff_row, eff_col,
                      normed_row, normed_col, (c_row, c_col), result, squeeze)
    if squeeze:
        v_o = v_o[0]
        result = RetrievalResult(rows[0], cols[0], flat[0], scores[0], weights[0])
    return v_o, result, tape


def _keys_backward(d_eff, normed, theta, over_param, ln_cache):
    if over_param:
        d_theta = d_eff.T @ normed
        d_normed = d_eff @ theta
    else:
        d_theta = np.zeros_like(theta)
        d_normed = d_eff
    if ln_cache is None:
        dk = d_theta.shape[0]
        return d_normed, d_theta, np.zeros(dk), np.zeros(dk)
    d_keys, d_gamma, d_beta = grad_layernorm(ln_cache, d_normed)
    return d_keys, d_theta, d_gamma, d_beta


def memory_backward(tape: MemoryTape, d_out):
    """Gradients of ``<d_out, v_o>`` w.r.t. the input and every block parameter.

    The selected indices are treated as constants: only the scores of the
    chosen pairs carry gradient. Parameter gradients are summed over the
    batch.
    """
    block, cfg, res = tape.block, tape.cfg, tape.result
    d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    if d_out.shape != (tape.x.shape[0], cfg.d_value):
        raise ContractError(f"d_out shape {d_out.shape} does not match forward output")
    plan = GatherPlan(res.flat_indices, res.weights)
    idx, row_grads, d_weights = fused_gather_backward(plan, block.values, d_out)
    d_values = scatter_rows(cfg.n, idx, row_grads)
    d_scores = _grad_weights(res.raw_scores, res.weights, d_weights, cfg.weight_mode)

    B, s = tape.x.shape[0], cfg.sqrt_n
    d_S_row = np.zeros((B, s))
    d_S_col = np.zeros((B, s))
    # pairs within a sample can share a row (or column); accumulate
    np.add.at(d_S_row, (np.arange(B)[:, None], res.rows), d_scores)
    np.add.at(d_S_col, (np.arange(B)[:, None], res.cols), d_scores)

    d_q_row = d_S_row @ tape.eff_row
    d_q_col = d_S_col @ tape.eff_col
    d_eff_row = d_S_row.T @ tape.q_row
    d_eff_col = d_S_col.T @ tape.q_col

    c_row, c_col = tape.k_caches
    dk_row, dth_row, dg_kr, db_kr = _keys_backward(d_eff_row, tape.normed_row, block.theta_row, cfg.over_param, c_row)
    dk_col, dth_col, dg_kc, db_kc = _keys_backward(d_eff_col, tape.normed_col, block.theta_col, cfg.over_param, c_col)

    dk = cfg.d_key
    if cfg.layernorm_qk:
        dqr_raw, dg_qr, db_qr = grad_layernorm(tape.q_caches[0], d_q_row)
        dqc_raw, dg_qc, db_qc = grad_layernorm(tape.q_caches[1], d_q_col)
        d_lnq_gamma, d_lnq_beta = dg_qr + dg_qc, db_qr + db_qc
    else:
        dqr_raw, dqc_raw = d_q_row, d_q_col
        d_lnq_gamma, d_lnq_beta = np.zeros(dk), np.zeros(dk)
    dz = np.concatenate([dqr_raw, dqc_raw], axis=1)
    d_query_w = dz.T @ tape.x
    d_query_b = dz.sum(axis=0)
    d_x = dz @ block.query_w

    grads = MemoryGradients(
        values=d_values,
        key_row=dk_row,
        key_col=dk_col,
        theta_row=dth_row,
        theta_col=dth_col,
        query_w=d_query_w,
        query_b=d_query_b,
        ln_q_gamma=d_lnq_gamma,
        ln_q_beta=d_lnq_beta,
        ln_k_gamma=dg_kr + dg_kc,
        ln_k_beta=db_kr + db_kc,
    )
    if tape.squeeze:
        d_x = d_x[0]
    return d_x, grads


# -- gated fusion ------------------------------------------------------------

def _gate(v, gating_fn):
    if gating_fn == "tanh":
        return np.tanh(v)
    if gating_fn == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * v))
    if gating_fn == "identity":
        return v
    raise ContractError(f"unknown gating_fn {gating_fn!r}")


def _gate_deriv(v, gating_fn):
    if gating_fn == "tanh":
        t = np.tanh(v)
        return 1.0 - t * t
    if gating_fn == "sigmoid":
        sg = 0.5 * (1.0 + np.tanh(0.5 * v))
        return sg * (1.0 - sg)
    if gating_fn == "identity":
        return np.ones_like(v)
    raise ContractError(f"unknown gating_fn {gating_fn!r}")


def memory_gate(x_in, v_o, gating_fn: str = "tanh") -> np.ndarray:
    """Element-wise ``x_in * g(v_o)``."""
    x_in = np.asarray(x_in, dtype=np.float64)
    v_o = np.asarray(v_o, dtype=np.float64)
    if x_in.shape != v_o.shape:
        raise ContractError(f"x_in {x_in.shape} and v_o {v_o.shape} differ")
    return x_in * _gate(v_o, gating_fn)


def grad_memory_gate(x_in, v_o, d_out, gating_fn: str = "tanh"):
    """Backward of ``memory_gate``: ``(d_x_in, d_v_o)``."""
    x_in = np.asarray(x_in, dtype=np.float64)
    v_o = np.asarray(v_o, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    if not x_in.shape == v_o.shape == d_out.shape:
        raise ContractError("memory_gate backward: shape mismatch")
    return d_out * _gate(v_o, gating_fn), d_out * x_in * _gate_deriv(v_o, gating_fn)


def memory_param_count(cfg: MemoryConfig, tokens: int = 1, per_token_values: bool = False) -> dict:
    """Total and activated parameter counts for one memory layer.

    The value table is sparse capacity: it counts toward the total but not the
    activated budget, so the activated count does not depend on ``k``.
    Query nets, sub-keys, theta and LayerNorm are dense and count in both.
    """
    s, dk = cfg.sqrt_n, cfg.d_key
    per_token = 2 * dk * cfg.d_in + 2 * dk + 2 * s * dk
    if cfg.over_param:
        per_token += 2 * dk * dk
    if cfg.layernorm_qk and cfg.ln_affine:
        per_token += 4 * dk
    value_tables = tokens if per_token_values else 1
    total = tokens * per_token + value_tables * cfg.n * cfg.d_value
    activated = tokens * per_token
    return {"total": total, "activated": activated, "values": value_tables * cfg.n * cfg.d_value}
