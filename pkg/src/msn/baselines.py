"""Dense FFN and sparse mixture-of-experts blocks used as controls."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import topk_rows
from .numerics import ContractError

_GELU_C = np.sqrt(2.0 / np.pi)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(np.float64)


def gelu(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


ACTIVATIONS = {"relu": (relu, relu_grad), "gelu": (gelu, gelu_grad)}


@dataclass
class Ffn2:
    """``phi(x @ w_in + bias) @ w_out`` with ``w_in`` (d_in, d_mid), ``w_out`` (d_mid, d_out)."""

    w_in: np.ndarray
    bias: np.ndarray
    w_out: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.w_in.shape[1] != self.bias.shape[0] or self.w_out.shape[0] != self.bias.shape[0]:
            raise ContractError("Ffn2 dims do not chain")

    @classmethod
    def init(cls, d_in, d_mid, d_out, rng, activation="relu", out_scale=1.0):
        return cls(
            w_in=rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_mid)),
            bias=np.zeros(d_mid),
            w_out=rng.normal(0.0, out_scale / np.sqrt(d_mid), size=(d_mid, d_out)),
            activation=activation,
        )

    @property
    def d_in(self):
        return self.w_in.shape[0]

    @property
    def d_mid(self):
        return self.w_in.shape[1]

    @property
    def d_out(self):
        return self.w_out.shape[1]

    def parameters(self) -> dict:
        return {"w_in": self.w_in, "bias": self.bias, "w_out": self.w_out}

    def param_count(self) -> int:
        return ffn_param_count(self.d_in, self.d_mid, self.d_out)


def ffn_param_count(d_in, d_mid, d_out) -> int:
    return d_in * d_mid + d_mid + d_mid * d_out


def ffn_macs(d_in, d_mid, d_out) -> int:
    return d_in * d_mid + d_mid * d_out


@dataclass
class FfnTape:
    ffn: Ffn2 = field(repr=False)
    x: np.ndarray
    pre: np.ndarray
    h: np.ndarray
    squeeze: bool


def ffn_forward(x, f: Ffn2, return_tape: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.d_in:
        raise ContractError(f"ffn input dim {x.shape[-1]}, expected {f.d_in}")
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    pre = x2 @ f.w_in + f.bias
    h = ACTIVATIONS[f.activation][0](pre)
    out = h @ f.w_out
    if squeeze:
        out = out[0]
    if return_tape:
        return out, FfnTape(f, x2, pre, h, squeeze)
    return out


def ffn_backward(tape: FfnTape, d_out):
    """Returns ``(d_x, grads)`` with ``grads`` keyed like ``Ffn2.parameters()``."""
    f = tape.ffn
    d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    if d_out.shape != (tape.x.shape[0], f.d_out):
        raise ContractError(f"d_out shape {d_out.shape} does not match ffn output")
    d_w_out = tape.h.T @ d_out
    d_h = d_out @ f.w_out.T
    d_pre = d_h * ACTIVATIONS[f.activation][1](tape.pre)
    grads = {"w_in": tape.x.T @ d_pre, "bias": d_pre.sum(axis=0), "w_out": d_w_out}
    d_x = d_pre @ f.w_in.T
    return (d_x[0] if tape.squeeze else d_x), grads


@dataclass
class SmoeBlock:
    experts: list
    router: np.ndarray  # (N, d_in)
    active_k: int

    def __post_init__(self):
        if not self.experts:
            raise ContractError("SmoeBlock needs at least one expert")
        shapes = {(e.d_in, e.d_mid, e.d_out) for e in self.experts}
        if len(shapes) != 1:
            raise ContractError("all experts must share dims")
        if self.router.shape != (len(self.experts), self.experts[0].d_in):
            raise ContractError(f"router shape {self.router.shape} does not match experts")
        if not 1 <= self.active_k <= len(self.experts):
            raise ContractError(f"active_k={self.active_k} out of range")

    @classmethod
    def init(cls, n_experts, active_k, d_in, d_mid, d_out, rng, activation="relu", out_scale=1.0):
        experts = [Ffn2.init(d_in, d_mid, d_out, rng, activation, out_scale) for _ in range(n_experts)]
        router = rng.normal(0.0, d_in ** -0.5, size=(n_experts, d_in))
        return cls(experts, router, active_k)

    @property
    def d_in(self):
        return self.experts[0].d_in

    @property
    def d_out(self):
        return self.experts[0].d_out

    def parameters(self) -> dict:
        params = {"router": self.router}
        for e_i, e in enumerate(self.experts):
            for name, arr in e.parameters().items():
                params[f"expert{e_i}.{name}"] = arr
        return params

    def param_count(self) -> dict:
        n = len(self.experts)
        per = self.experts[0].param_count()
        route = self.d_in * n
        return {"total": n * per + route, "activated": self.active_k * per + route}


@dataclass
class SmoeTape:
    block: SmoeBlock = field(repr=False)
    x: np.ndarray
    selected: np.ndarray  # (B, active_k)
    gates: np.ndarray  # (B, active_k)
    expert_out: dict  # expert id -> (rows, out, tape)
    squeeze: bool


def smoe_forward(x, s: SmoeBlock, return_tape: bool = False):
    """Route each sample to its top ``active_k`` experts and mix them with softmax gates."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != s.d_in:
        raise ContractError(f"smoe input dim {x.shape[-1]}, expected {s.d_in}")
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    B = x2.shape[0]
    logits = x2 @ s.router.T
    selected, sel_logits = topk_rows(logits, s.active_k)
    e = np.exp(sel_logits - sel_logits[:, :1])
    gates = e / e.sum(axis=1, keepdims=True)
    out = np.zeros((B, s.d_out))
    expert_out = {}
    for e_id in np.unique(selected):
        rows, slot = np.nonzero(selected == e_id)
        y, tape = ffn_forward(x2[rows], s.experts[e_id], return_tape=True)
        out[rows] += gates[rows, slot, None] * y
        expert_out[int(e_id)] = (rows, slot, y, tape)
    result = out[0] if squeeze else out
    if return_tape:
        return result, SmoeTape(s, x2, selected, gates, expert_out, squeeze)
    return result


def smoe_backward(tape: SmoeTape, d_out):
    """Returns ``(d_x, grads)``; experts that no sample selected get exact zeros."""
    s = tape.block
    d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    B = tape.x.shape[0]
    if d_out.shape != (B, s.d_out):
        raise ContractError(f"d_out shape {d_out.shape} does not match smoe output")
    grads = {name: np.zeros_like(arr) for name, arr in s.parameters().items()}
    d_x = np.zeros_like(tape.x)
    d_gates = np.zeros_like(tape.gates)
    for e_id, (rows, slot, y, ftape) in tape.expert_out.items():
        d_gates[rows, slot] = (y * d_out[rows]).sum(axis=1)
        dx_e, g_e = ffn_backward(ftape, tape.gates[rows, slot, None] * d_out[rows])
        d_x[rows] += dx_e
        for name, g in g_e.items():
            grads[f"expert{e_id}.{name}"] += g
    inner = (tape.gates * d_gates).sum(axis=1, keepdims=True)
    d_sel_logits = tape.gates * (d_gates - inner)
    d_logits = np.zeros((B, len(s.experts)))
    np.put_along_axis(d_logits, tape.selected, d_sel_logits, axis=1)
    grads["router"] = d_logits.T @ tape.x
    d_x += d_logits @ s.router
    return (d_x[0] if tape.squeeze else d_x), grads
