"""Quadratic softmax attention, the ground truth for every estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_mat, make_rng


@dataclass(frozen=True)
class AttentionInstance:
    """Queries ``Q`` (N x d), keys ``K`` and values ``V`` (M x d).

    Every logit is ``logit_scale * q_n . k_m``; ``logit_scale`` defaults to
    ``1/sqrt(d)``. Random-feature code works on the pre-scaled copies
    ``q_scaled``/``k_scaled`` (multiplied by ``sqrt(logit_scale)``) so that
    their plain dot product equals the scaled logit.
    """

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    logit_scale: float | None = None
    q_scaled: np.ndarray = field(init=False, repr=False, compare=False)
    k_scaled: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        Q = as_mat(self.Q, "Q")
        K = as_mat(self.K, "K")
        V = as_mat(self.V, "V")
        if Q.shape[1] != K.shape[1]:
            raise ValueError(f"Q has {Q.shape[1]} columns but K has {K.shape[1]}")
        if K.shape[0] != V.shape[0]:
            raise ValueError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
        if K.shape[0] == 0 or Q.shape[0] == 0:
            raise ValueError("empty query or key set")
        scale = 1.0 / math.sqrt(Q.shape[1]) if self.logit_scale is None else float(self.logit_scale)
        if not (math.isfinite(scale) and scale > 0):
            raise ValueError(f"logit_scale must be finite and positive, got {scale}")
        root = math.sqrt(scale)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "logit_scale", scale)
        object.__setattr__(self, "q_scaled", Q * root)
        object.__setattr__(self, "k_scaled", K * root)

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    @property
    def M(self) -> int:
        return self.K.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def dv(self) -> int:
        return self.V.shape[1]

    def logits(self, rows=None) -> np.ndarray:
        q = self.Q if rows is None else self.Q[rows]
        return (q @ self.K.T) * self.logit_scale

    def replace(self, **changes) -> "AttentionInstance":
        kw = dict(Q=self.Q, K=self.K, V=self.V, logit_scale=self.logit_scale)
        kw.update(changes)
        return AttentionInstance(**kw)


def attention_weights(inst: AttentionInstance, causal: bool = False) -> np.ndarray:
    """Row-stochastic N x M matrix of softmax probabilities."""
    w = inst.logits()
    if causal:
        _mask_future(w)
    w -= w.max(axis=1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=1, keepdims=True)
    return w


def softmax_attention(inst: AttentionInstance, causal: bool = False) -> np.ndarray:
    """Exact softmax attention; ``causal`` lets query n see keys 0..n only.

    A single N x M buffer is materialized and reused in place, so memory is
    quadratic by construction.
    """
    return attention_weights(inst, causal=causal) @ inst.V


def _mask_future(logits: np.ndarray) -> None:
    n, m = logits.shape
    if n != m:
        raise ValueError("causal attention requires N == M")
    logits[np.triu_indices(n, k=1)] = -np.inf


def softmax_flops(N: int, M: int, d: int, dv: int | None = None) -> int:
    dv = d if dv is None else dv
    # logits, max/exp/sum/normalize, weighted sum
    return 2 * N * M * d + 4 * N * M + 2 * N * M * dv


def softmax_peak_bytes(N: int, M: int, d: int, dv: int | None = None) -> int:
    """Live float64 buffers: one N x M score matrix plus the N x dv output."""
    dv = d if dv is None else dv
    return 8 * (N * M + N + N * dv)


def random_instance(rng, N: int, M: int | None = None, d: int = 16, dv: int | None = None,
                    unit_norm: bool = True, logit_scale=None) -> AttentionInstance:
    """Gaussian Q, K, V; query and key rows normalized to unit length by default.

    ``rng`` is a Generator or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    M = N if M is None else M
    dv = d if dv is None else dv
    Q = rng.standard_normal((N, d))
    K = rng.standard_normal((M, d))
    V = rng.standard_normal((M, dv))
    if unit_norm:
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        K /= np.linalg.norm(K, axis=1, keepdims=True)
    return AttentionInstance(Q, K, V, logit_scale)
