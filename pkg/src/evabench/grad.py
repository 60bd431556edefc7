"""Analytic backward passes, checked against central finite differences."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .eva import query_rows_for_group, run_eva
from .exact import AttentionInstance, attention_weights, softmax_attention
from .features import RFConfig
from .partition import PartitionSpec


@dataclass
class GradReport:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    max_rel_err_vs_fd: float | None = None


def backward_softmax_attention(inst: AttentionInstance, upstream, check: bool = False, h: float = 1e-5) -> GradReport:
    """Gradient of ``<upstream, softmax_attention(inst)>`` w.r.t. Q, K, V."""
    U = np.asarray(upstream, dtype=np.float64)
    P = attention_weights(inst)
    out = P @ inst.V
    dV = P.T @ U
    dS = P * (U @ inst.V.T - np.einsum("nd,nd->n", U, out)[:, None])
    dS *= inst.logit_scale
    rep = GradReport(dS @ inst.K, dS.T @ inst.Q, dV)
    if check:
        rep.max_rel_err_vs_fd = max_rel_error(rep, inst, U, softmax_attention, h)
    return rep


def backward_practical_eva(inst: AttentionInstance, partition: PartitionSpec, cfg: RFConfig, upstream,
                           sigma_mode="identity", proposal: str = "qk", local_bias=None,
                           check: bool = False, h: float = 1e-5) -> GradReport:
    """Gradient of ``<upstream, practical_eva(...)>`` in deterministic-mean mode.

    Chains through the softmax over block-local and group logits, the group
    coefficients' xi weights, the proposal means (which are the directions
    themselves in this mode) and the mean pooling of keys and queries.
    """
    if cfg.mode != "deterministic-mean":
        raise ValueError("gradients are only defined for deterministic-mean mode")
    if sigma_mode not in (None, "identity"):
        raise ValueError("gradients are only implemented for the identity sigma")
    U = np.asarray(upstream, dtype=np.float64)
    _, _, layouts, traces = run_eva(inst, partition, cfg, sigma_mode, proposal, local_bias, keep_trace=True)
    Qs, Ks, V = inst.q_scaled, inst.k_scaled, inst.V
    dQs = np.zeros_like(Qs)
    dKs = np.zeros_like(Ks)
    dV = np.zeros_like(V)
    dbeta = {id(lay): np.zeros_like(lay.betas) for lay in layouts}
    dktilde = {id(lay): np.zeros_like(lay.k_tilde) for lay in layouts}

    for tr in traces:
        u = U[tr.qs:tr.qe]
        ydot = np.einsum("nd,nd->n", u, tr.out)[:, None]
        dV[tr.lo:tr.hi] += tr.wE.T @ u
        dLE = tr.wE * (u @ V[tr.lo:tr.hi].T - ydot)
        dQs[tr.qs:tr.qe] += dLE @ Ks[tr.lo:tr.hi]
        dKs[tr.lo:tr.hi] += dLE.T @ Qs[tr.qs:tr.qe]
        if tr.layout is not None:
            lay = tr.layout
            dbeta[id(lay)] += tr.wG.T @ u
            dLG = tr.wG * (u @ lay.betas.T - ydot)
            dQs[tr.qs:tr.qe] += dLG @ lay.k_tilde
            dktilde[id(lay)] += dLG.T @ Qs[tr.qs:tr.qe]

    for lay in layouts:
        db, dkt = dbeta[id(lay)], dktilde[id(lay)]
        for c, idx in enumerate(lay.groups):
            a = lay.beta_weights[c]
            dV[idx] += a[:, None] * db[c]
            dlx = a * ((V[idx] - lay.betas[c]) @ db[c])
            dKs[idx] += dlx[:, None] * (lay.omegas[c] - Ks[idx])
            domega = dlx @ Ks[idx]
            dkbar = dkt[c].copy()
            dqbar = np.zeros_like(domega)
            if proposal in ("qk", "q"):
                dqbar += domega
            if proposal == "qk":
                dkbar += domega
            dKs[idx] += dkbar / len(idx)
            rows = query_rows_for_group(idx, inst.N, inst.M)
            dQs[rows] += dqbar / len(rows)

    root = math.sqrt(inst.logit_scale)
    rep = GradReport(dQs * root, dKs * root, dV)
    if check:
        def fwd(i):
            return run_eva(i, partition, cfg, sigma_mode, proposal, local_bias)[0]
        rep.max_rel_err_vs_fd = max_rel_error(rep, inst, U, fwd, h)
    return rep


def finite_difference_grad(f: Callable[[np.ndarray], float], X, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(X + h e_ij) - f(X - h e_ij)) / 2h`` for every entry."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    X = np.array(X, dtype=np.float64)
    G = np.empty_like(X)
    for ij in np.ndindex(X.shape):
        orig = X[ij]
        X[ij] = orig + h
        up = f(X)
        X[ij] = orig - h
        down = f(X)
        X[ij] = orig
        G[ij] = (up - down) / (2 * h)
    return G


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic)
    denom = np.maximum(np.abs(analytic), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def max_rel_error(rep: GradReport, inst: AttentionInstance, upstream, forward, h: float = 1e-5) -> float:
    """Worst relative error of ``rep`` against finite differences of ``<upstream, forward(inst)>``."""
    worst = 0.0
    for name, grad in (("Q", rep.dQ), ("K", rep.dK), ("V", rep.dV)):
        def f(X, name=name):
            return float(np.sum(upstream * forward(inst.replace(**{name: X}))))
        fd = finite_difference_grad(f, getattr(inst, name), h)
        worst = max(worst, relative_error(grad, fd))
    return worst
