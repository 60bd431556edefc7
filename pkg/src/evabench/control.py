"""Per-token control-variate view of random-feature attention.

This is the verification layer: it evaluates expectations such as
``E[h_m] = exp(logit_nm) / Z`` from exact logits, so everything here is
quadratic and works one query at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exact import AttentionInstance
from .features import RFSamples, log_xi_matrix
from .numerics import logsumexp, stable_softmax
from .partition import PartitionSpec


@dataclass(frozen=True)
class DecomposedTerms:
    """Per-key pieces ``g_m`` (M x d) and ``h_m`` (M,) for one query.

    Like :func:`evabench.features.snis_estimate`, both omit the 1/Z factor;
    ``log_z`` is the exact log-normalizer used to restore absolute scale.
    """

    g_terms: np.ndarray
    h_terms: np.ndarray
    query_index: int
    log_z: float
    Z_free: bool = True


def decompose(inst: AttentionInstance, query_index: int, samples: RFSamples) -> DecomposedTerms:
    q = inst.q_scaled[query_index]
    lw = (
        samples.log_alpha[None, :]
        + (samples.omegas @ q - 0.5 * (q @ q))[None, :]
        + log_xi_matrix(inst.k_scaled, samples.omegas)
    )
    h = np.exp(logsumexp(lw, axis=1))
    g = h[:, None] * inst.V
    log_z = logsumexp(inst.logits(query_index))
    return DecomposedTerms(g, h, query_index, log_z)


# coefficient schemes --------------------------------------------------------

@dataclass(frozen=True)
class Global:
    """One coefficient shared by every key."""

    beta: np.ndarray

    def per_token(self, M: int, dv: int) -> np.ndarray:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (dv,):
            raise ValueError(f"global beta has shape {beta.shape}, expected ({dv},)")
        return np.broadcast_to(beta, (M, dv))


@dataclass(frozen=True)
class PerGroup:
    """One coefficient per group; ``groups`` must partition ``[M]``."""

    betas: np.ndarray
    groups: Sequence[np.ndarray]

    def per_token(self, M: int, dv: int) -> np.ndarray:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (len(self.groups), dv):
            raise ValueError(f"group betas have shape {betas.shape}, expected ({len(self.groups)}, {dv})")
        out = np.full((M, dv), np.nan)
        seen = np.zeros(M, dtype=int)
        for c, idx in enumerate(self.groups):
            out[idx] = betas[c]
            seen[idx] += 1
        if np.any(seen != 1):
            raise ValueError("groups do not partition the key indices")
        return out


@dataclass(frozen=True)
class PerToken:
    """A separate coefficient for every key."""

    betas: np.ndarray

    def per_token(self, M: int, dv: int) -> np.ndarray:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (M, dv):
            raise ValueError(f"per-token betas have shape {betas.shape}, expected ({M}, {dv})")
        return betas


CoefficientScheme = Global | PerGroup | PerToken


def cv_estimate(terms: DecomposedTerms, scheme: CoefficientScheme, expected_h) -> np.ndarray:
    """``sum_m g_m - beta_m h_m + beta_m E[h_m]`` with g, h rescaled by 1/Z."""
    M, dv = terms.g_terms.shape
    expected_h = np.asarray(expected_h, dtype=np.float64)
    if expected_h.shape != (M,):
        raise ValueError(f"expected_h has shape {expected_h.shape}, expected ({M},)")
    B = scheme.per_token(M, dv)
    inv_z = math.exp(-terms.log_z)
    g = terms.g_terms * inv_z
    h = terms.h_terms * inv_z
    return g.sum(axis=0) - h @ B + expected_h @ B


def expected_h_m(inst: AttentionInstance, query_index: int) -> np.ndarray:
    """Closed form ``E[h_m] = exp(logit_nm) / Z``: the softmax row itself."""
    return stable_softmax(inst.logits(query_index))


def optimal_beta_per_token(inst: AttentionInstance) -> np.ndarray:
    """Variance-minimizing per-key coefficients; they are the values themselves."""
    return inst.V.copy()


def _groups(partition, query_index: int) -> list[np.ndarray]:
    if isinstance(partition, PartitionSpec):
        return partition.groups_for(query_index)
    return [np.asarray(g, dtype=int) for g in partition]


def optimal_beta_group(inst: AttentionInstance, query_index: int, partition) -> np.ndarray:
    """Softmax-weighted mean of V within each group (C x dv).

    ``partition`` is a :class:`PartitionSpec` (its groups for this query are
    used) or an explicit sequence of index arrays.
    """
    groups = _groups(partition, query_index)
    logits = inst.logits(query_index)
    out = np.empty((len(groups), inst.dv))
    for c, idx in enumerate(groups):
        if len(idx) == 0:
            raise ValueError(f"group {c} is empty")
        out[c] = stable_softmax(logits[idx]) @ inst.V[idx]
    return out


def weighted_mse(inst: AttentionInstance, query_index: int, partition, betas, index_set=None) -> float:
    """Softmax-weighted squared distance of group coefficients to the per-key optima.

    Weights are ``exp(logit_nm)`` normalized over ``index_set`` (default: the
    union of the groups), which the groups must partition.
    """
    groups = _groups(partition, query_index)
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape[0] != len(groups):
        raise ValueError(f"{betas.shape[0]} coefficients for {len(groups)} groups")
    members = np.concatenate(groups) if groups else np.array([], dtype=int)
    U = np.unique(members) if index_set is None else np.asarray(index_set, dtype=int)
    if U.size == 0:
        raise ValueError("index set U is empty")
    if members.size != U.size or not np.array_equal(np.sort(members), np.sort(U)):
        raise ValueError("groups do not partition the index set")
    logits = inst.logits(query_index)
    log_norm = logsumexp(logits[U])
    total = 0.0
    for c, idx in enumerate(groups):
        w = np.exp(logits[idx] - log_norm)
        total += float(w @ np.sum((betas[c] - inst.V[idx]) ** 2, axis=1))
    return total


def group_mean_dominance_check(token_optima, beta_global, weights, groups) -> tuple[float, float]:
    """Weighted MSE of per-group weighted means versus one shared coefficient.

    ``token_optima`` (|U| x d) and ``weights`` (|U|,) are indexed locally;
    ``groups`` partitions ``range(|U|)``. Weights must be positive and sum to
    one. Returns ``(J_grouped, J_global)``.
    """
    X = np.asarray(token_optima, dtype=np.float64)
    a = np.asarray(weights, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("weights must be strictly positive")
    if abs(a.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights sum to {a.sum()!r}, not 1")
    beta = np.asarray(beta_global, dtype=np.float64)
    j_grouped = 0.0
    j_global = 0.0
    for idx in groups:
        idx = np.asarray(idx, dtype=int)
        w = a[idx]
        center = (w @ X[idx]) / w.sum()
        j_grouped += float(w @ np.sum((X[idx] - center) ** 2, axis=1))
        j_global += float(w @ np.sum((X[idx] - beta) ** 2, axis=1))
    return j_grouped, j_global
