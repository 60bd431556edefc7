"""Positive randomized mappings, random features, Performer/RFA and SNIS.

Random-feature quantities are always evaluated on the scaled vectors
``inst.q_scaled``/``inst.k_scaled``, so ``xi(q, w) * xi(k, w)`` is an
unbiased estimate of ``exp(logit_scale * q . k)``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .exact import AttentionInstance
from .numerics import make_rng, sample_gaussian
from .report import EstimatorReport

MODES = ("sample", "deterministic-mean")
LOG_OVERFLOW = 700.0


@dataclass(frozen=True)
class RFConfig:
    """How the S random-feature directions are obtained.

    ``proposal_mean`` is None for the standard normal proposal, otherwise a
    single row (shared) or an ``S x d`` matrix of per-sample means. In
    ``deterministic-mean`` mode each direction is set to its proposal mean and
    the seed is ignored.
    """

    S: int = 64
    proposal_mean: np.ndarray | None = None
    seed: int = 0
    mode: str = "sample"

    def __post_init__(self):
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.proposal_mean is not None:
            mu = np.atleast_2d(np.asarray(self.proposal_mean, dtype=np.float64))
            if mu.shape[0] not in (1, self.S):
                raise ValueError(f"proposal_mean has {mu.shape[0]} rows, expected 1 or {self.S}")
            object.__setattr__(self, "proposal_mean", mu)

    @property
    def standard_normal(self) -> bool:
        return self.proposal_mean is None or not np.any(self.proposal_mean)


@dataclass(frozen=True)
class RFSamples:
    """Sampled directions with their log densities.

    Both densities drop the shared ``(2 pi)^(d/2)`` constant.
    """

    omegas: np.ndarray
    log_normal: np.ndarray
    log_proposal: np.ndarray

    @property
    def S(self) -> int:
        return self.omegas.shape[0]

    @property
    def log_alpha(self) -> np.ndarray:
        """``log(N(w; 0, I) / q(w) / S)`` per sample (the 1/Z factor is left out)."""
        return self.log_normal - self.log_proposal - math.log(self.S)


def draw_samples(cfg: RFConfig, d: int) -> RFSamples:
    mu = cfg.proposal_mean
    if mu is not None and mu.shape[1] != d:
        raise ValueError(f"proposal_mean has {mu.shape[1]} columns, expected {d}")
    if cfg.mode == "deterministic-mean":
        omegas = np.zeros((cfg.S, d)) if mu is None else np.broadcast_to(mu, (cfg.S, d)).copy()
    else:
        omegas = sample_gaussian(make_rng(cfg.seed), cfg.S, d, mu)
    return samples_from_omegas(omegas, mu)


def samples_from_omegas(omegas, proposal_mean=None) -> RFSamples:
    omegas = np.ascontiguousarray(omegas, dtype=np.float64)
    log_normal = -0.5 * np.einsum("sd,sd->s", omegas, omegas)
    if proposal_mean is None:
        log_proposal = log_normal.copy()
    else:
        diff = omegas - np.atleast_2d(proposal_mean)
        log_proposal = -0.5 * np.einsum("sd,sd->s", diff, diff)
    return RFSamples(omegas, log_normal, log_proposal)


def log_xi(x, omega) -> float:
    """``log xi(x, w) = w . x - |x|^2 / 2``."""
    x = np.asarray(x, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if x.shape != omega.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {omega.shape}")
    return float(omega @ x - 0.5 * (x @ x))


def log_xi_matrix(X: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """``log xi`` for every (row of X, direction) pair, shape ``n x S``."""
    return X @ omegas.T - 0.5 * np.einsum("nd,nd->n", X, X)[:, None]


def feature_map(X, samples: RFSamples) -> np.ndarray:
    """``phi(x) = [xi(x, w_1), ..., xi(x, w_S)] / sqrt(S)`` for every row of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != samples.omegas.shape[1]:
        raise ValueError(f"X of shape {X.shape} does not match directions {samples.omegas.shape}")
    L = log_xi_matrix(X, samples.omegas)
    if np.any(L > LOG_OVERFLOW):
        raise OverflowError(f"log xi reaches {L.max():.1f} > {LOG_OVERFLOW}; inputs too large for raw features")
    return np.exp(L) / math.sqrt(samples.S)


def _shifted_key_features(log_k: np.ndarray):
    # per-direction shift over keys; the shift is folded back into the query side
    shift = log_k.max(axis=0)
    return np.exp(log_k - shift), shift


def performer_attention(inst: AttentionInstance, cfg: RFConfig, samples: RFSamples | None = None) -> EstimatorReport:
    """Vanilla RFA: ratio of random-feature sums, linear in N and M.

    Computed in the log domain with a per-direction shift on the keys and a
    per-query shift on the queries, so moderate norms do not overflow.
    """
    if not cfg.standard_normal:
        raise ValueError("performer_attention needs the standard normal proposal")
    t0 = time.perf_counter_ns()
    if samples is None:
        samples = draw_samples(cfg, inst.d)
    S = samples.S
    kf, kshift = _shifted_key_features(log_xi_matrix(inst.k_scaled, samples.omegas))
    kv = kf.T @ inst.V
    ksum = kf.sum(axis=0)
    lq = log_xi_matrix(inst.q_scaled, samples.omegas) + kshift
    qshift = lq.max(axis=1, keepdims=True)
    qf = np.exp(lq - qshift)
    num = qf @ kv
    den = qf @ ksum
    if not np.all(np.isfinite(den)) or np.any(den <= 0):
        raise FloatingPointError("performer denominator underflowed or is not finite")
    out = num / den[:, None]
    Z = np.exp(qshift[:, 0] + np.log(den)) / S
    N, M, d, dv = inst.N, inst.M, inst.d, inst.dv
    return EstimatorReport(
        output=out,
        Z_estimates=Z,
        group_betas=np.zeros((0, dv)),
        omegas_used=samples.omegas,
        wallclock_ns=time.perf_counter_ns() - t0,
        flop_estimate=performer_flops(N, M, d, S, dv),
        peak_bytes_estimate=performer_peak_bytes(N, M, d, S, dv),
    )


def performer_flops(N: int, M: int, d: int, S: int, dv: int | None = None) -> int:
    dv = d if dv is None else dv
    return 2 * (N + M) * S * d + 3 * (N + M) * S + 2 * M * S * dv + 2 * N * S * (dv + 1) + N * dv


def performer_peak_bytes(N: int, M: int, d: int, S: int, dv: int | None = None) -> int:
    dv = d if dv is None else dv
    # feature matrices for queries and keys, S x dv key-value summary, output
    return 8 * (N * S + M * S + S * dv + S + N * dv + N)


def snis_estimate(inst: AttentionInstance, query_index: int, cfg: RFConfig, samples: RFSamples | None = None):
    """Self-normalized importance sampling estimate for one query.

    Returns ``(value, g, h)`` with ``value = g / h``. ``g`` and ``h`` omit the
    unknown normalizer 1/Z (both are Z times the textbook quantities); the
    ratio is unaffected.
    """
    if samples is None:
        samples = draw_samples(cfg, inst.d)
    q = inst.q_scaled[query_index]
    lw = (
        samples.log_alpha[None, :]
        + (samples.omegas @ q - 0.5 * (q @ q))[None, :]
        + log_xi_matrix(inst.k_scaled, samples.omegas)
    )
    shift = lw.max()
    w = np.exp(lw - shift)  # M x S
    per_key = w.sum(axis=1)
    h_rel = per_key.sum()
    g_rel = per_key @ inst.V
    scale = math.exp(shift) if shift < LOG_OVERFLOW else math.inf
    h = h_rel * scale
    if not math.isfinite(h) or h <= 0:
        raise FloatingPointError(f"h is not representable (log h = {shift + math.log(h_rel):.1f})")
    g = g_rel * scale
    return g_rel / h_rel, g, h
