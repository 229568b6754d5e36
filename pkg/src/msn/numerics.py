"""Dense linear algebra and LayerNorm with hand-written backward passes.

Everything is stored row-major as float64 numpy arrays. Functions that take a
"vector" also accept a batch of row vectors with shape ``(B, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_LN_EPS = 1e-5


class ContractError(ValueError):
    """Raised when an operation's shape or range precondition is violated."""


class NonFiniteError(ContractError):
    """An input held NaN or infinity."""


def as_matrix(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return a


def as_vector(a, name="vector") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (1, 2):
        raise ContractError(f"{name} must be 1-D (or a 2-D batch), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return a


def matvec(M, v) -> np.ndarray:
    """``out[i] = sum_j M[i, j] * v[j]``, accumulated left to right over ``j``.

    The fixed accumulation order makes the result reproducible bit-for-bit
    against a naive double loop. ``v`` may be a batch ``(B, cols)``.
    """
    M = as_matrix(M, "M")
    v = as_vector(v, "v")
    if v.shape[-1] != M.shape[1]:
        raise ContractError(f"matvec: M is {M.shape}, v has dim {v.shape[-1]}")
    acc = np.zeros(v.shape[:-1] + (M.shape[0],))
    for j in range(M.shape[1]):
        acc = acc + M[:, j] * v[..., j, None]
    return acc


def grad_matvec(M, v, d_out):
    """Backward of ``matvec``: returns ``(dM, dv)``.

    For a batch, ``dM`` is summed over the batch in sample order.
    """
    M = as_matrix(M, "M")
    v = as_vector(v, "v")
    d_out = as_vector(d_out, "d_out")
    if d_out.shape[-1] != M.shape[0] or d_out.shape[:-1] != v.shape[:-1]:
        raise ContractError(f"grad_matvec: d_out shape {d_out.shape} does not match output")
    if v.ndim == 1:
        dM = np.outer(d_out, v)
    else:
        dM = d_out.T @ v
    dv = d_out @ M
    return dM, dv


def linear(x, W, b=None):
    """Batched affine map ``x @ W.T + b`` with ``W`` of shape (out, in)."""
    y = x @ W.T
    if b is not None:
        y = y + b
    return y


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_LN_EPS
    affine: bool = True

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ContractError("gamma and beta must be 1-D with equal dims")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")

    @classmethod
    def identity(cls, dim: int, epsilon: float = DEFAULT_LN_EPS, affine: bool = True):
        return cls(np.ones(dim), np.zeros(dim), epsilon, affine)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    params: LayerNormParams = field(repr=False)


def layernorm(x, p: LayerNormParams, return_cache: bool = False):
    """Normalize the last axis of ``x`` to zero mean / unit variance, then scale and shift."""
    x = as_vector(x, "x") if np.ndim(x) <= 2 else np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.dim:
        raise ContractError(f"layernorm: x has dim {x.shape[-1]}, params have dim {p.dim}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = xc * inv_std
    out = xhat * p.gamma + p.beta if p.affine else xhat
    if return_cache:
        return out, LayerNormCache(xhat, inv_std, p)
    return out


def grad_layernorm(cache: LayerNormCache, d_out):
    """Backward of ``layernorm``: returns ``(dx, dgamma, dbeta)``.

    ``dgamma``/``dbeta`` are summed over every leading axis. They are zero
    when the params are non-affine.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != cache.xhat.shape:
        raise ContractError(f"grad_layernorm: d_out {d_out.shape} vs cached {cache.xhat.shape}")
    p = cache.params
    d = d_out.shape[-1]
    lead = tuple(range(d_out.ndim - 1))
    if p.affine:
        dgamma = (d_out * cache.xhat).sum(axis=lead) if lead else d_out * cache.xhat
        dbeta = d_out.sum(axis=lead) if lead else d_out.copy()
        dxhat = d_out * p.gamma
    else:
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        dxhat = d_out
    # standard closed form: dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * cache.xhat).mean(axis=-1, keepdims=True)
    dx = cache.inv_std * (dxhat - m1 - cache.xhat * m2)
    return dx, dgamma, dbeta
