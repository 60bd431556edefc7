"""EVA estimators: ideal (exact group weights), practical (linear time), and
the shared-coefficient form that coincides with Scatterbrain.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass

import numpy as np

from .exact import AttentionInstance
from .features import RFConfig, draw_samples, log_xi_matrix
from .numerics import logsumexp, make_rng, stable_softmax
from .partition import PartitionSpec
from .report import EstimatorReport

PROPOSALS = ("qk", "q", "zero")

# Test hook: names listed here switch on deliberate bugs (see fault_injection).
_ACTIVE_FAULTS: set[str] = set()
KNOWN_FAULTS = ("group_term_sign",)


@contextlib.contextmanager
def fault_injection(*names: str):
    """Temporarily enable named faults, e.g. ``"group_term_sign"`` flips the sign of
    the group term in the practical estimator's numerator."""
    unknown = set(names) - set(KNOWN_FAULTS)
    if unknown:
        raise ValueError(f"unknown faults {sorted(unknown)}")
    saved = set(_ACTIVE_FAULTS)
    _ACTIVE_FAULTS.update(names)
    try:
        yield
    finally:
        _ACTIVE_FAULTS.clear()
        _ACTIVE_FAULTS.update(saved)


# group summaries --------------------------------------------------------------

@dataclass(frozen=True)
class LinearLayerNorm:
    """``sigma(x) = LayerNorm(x @ weights)`` without affine terms."""

    weights: np.ndarray
    eps: float = 1e-5

    def __call__(self, X: np.ndarray) -> np.ndarray:
        Y = X @ np.asarray(self.weights, dtype=np.float64)
        mu = Y.mean(axis=-1, keepdims=True)
        var = Y.var(axis=-1, keepdims=True)
        return (Y - mu) / np.sqrt(var + self.eps)


def _apply_sigma(sigma_mode, X: np.ndarray) -> np.ndarray:
    if sigma_mode is None or sigma_mode == "identity":
        return X
    if isinstance(sigma_mode, LinearLayerNorm):
        return sigma_mode(X)
    raise ValueError(f"unsupported sigma_mode {sigma_mode!r}")


@dataclass(frozen=True)
class GroupSummary:
    k_tilde: np.ndarray
    q_tilde: np.ndarray
    sigma_mode: object = "identity"


def query_rows_for_group(idx: np.ndarray, N: int, M: int) -> np.ndarray:
    """Queries pooled into a group's query summary (same indices when N == M)."""
    if N == M:
        return idx
    return np.unique((np.asarray(idx) * N) // M)


def group_summaries(inst: AttentionInstance, partition: PartitionSpec, sigma_mode="identity",
                    groups=None) -> GroupSummary:
    """Mean-pool scaled keys and queries per group, then apply sigma."""
    groups = partition.P_sets if groups is None else groups
    if not groups:
        raise ValueError("group summaries need at least one group")
    kbar = np.stack([inst.k_scaled[idx].mean(axis=0) for idx in groups])
    qbar = np.stack([inst.q_scaled[query_rows_for_group(idx, inst.N, inst.M)].mean(axis=0) for idx in groups])
    return GroupSummary(_apply_sigma(sigma_mode, kbar), _apply_sigma(sigma_mode, qbar), sigma_mode)


def proposal_means(summary: GroupSummary, proposal: str = "qk") -> np.ndarray:
    if proposal == "qk":
        return summary.q_tilde + summary.k_tilde
    if proposal == "q":
        return summary.q_tilde.copy()
    if proposal == "zero":
        return np.zeros_like(summary.k_tilde)
    raise ValueError(f"proposal must be one of {PROPOSALS}, got {proposal!r}")


def group_coefficients(inst: AttentionInstance, partition: PartitionSpec, summary: GroupSummary,
                       cfg: RFConfig, proposal: str = "qk", groups=None, rng=None):
    """Single-sample group coefficients, shared by every query.

    One direction per group from ``N(mu_c, I)`` (or ``mu_c`` itself in
    deterministic-mean mode); the coefficient is the xi(k_m, w_c)-weighted
    mean of the group's values. Returns ``(betas, omegas)``.
    """
    groups = partition.P_sets if groups is None else groups
    mu = proposal_means(summary, proposal)
    if cfg.mode == "deterministic-mean":
        omegas = mu
    else:
        rng = make_rng(cfg.seed) if rng is None else rng
        omegas = mu + rng.standard_normal(mu.shape)
    betas = np.empty((len(groups), inst.dv))
    for c, idx in enumerate(groups):
        lx = log_xi_matrix(inst.k_scaled[idx], omegas[c:c + 1])[:, 0]
        betas[c] = stable_softmax(lx) @ inst.V[idx]
    return betas, omegas


# ideal EVA --------------------------------------------------------------------

def _check_disjoint(partition: PartitionSpec):
    if partition.over_full_range and partition.K and partition.C:
        raise ValueError("ideal EVA needs E and the groups disjoint; build the partition with over_full_range=False")


def ideal_eva(inst: AttentionInstance, partition: PartitionSpec, cfg: RFConfig,
              coefficients: str = "ratio", sigma_mode="identity", proposal: str = "qk") -> EstimatorReport:
    """Quadratic reference EVA with exact per-group weights and exact Z.

    ``coefficients="ratio"`` estimates each group coefficient as
    ``sum_{P_c} g_m / sum_{P_c} h_m`` from the S directions of ``cfg``
    (query dependent). ``"single-sample"`` reuses the practical estimator's
    query-independent coefficients.
    """
    _check_disjoint(partition)
    t0 = time.perf_counter_ns()
    N, dv = inst.N, inst.dv
    out = np.empty((N, dv))
    Z = np.empty(N)
    samples = None
    omegas_used = np.zeros((0, inst.d))
    group_betas = np.zeros((0, dv))
    shared = {}
    if coefficients == "ratio":
        samples = draw_samples(cfg, inst.d)
        log_k = log_xi_matrix(inst.k_scaled, samples.omegas)
        omegas_used = samples.omegas
    elif coefficients != "single-sample":
        raise ValueError(f"unknown coefficient convention {coefficients!r}")
    rng = make_rng(cfg.seed)
    for b, (qs, qe) in enumerate(partition.query_ranges):
        if qe <= qs:
            continue
        groups = partition.groups_for_block(b)
        if coefficients == "single-sample" and groups:
            key = id(groups)
            if key not in shared:
                summ = group_summaries(inst, partition, sigma_mode, groups)
                shared[key] = group_coefficients(inst, partition, summ, cfg, proposal, groups, rng)
            group_betas, omegas_used = shared[key]
        lo, hi = partition.block_keys(b)
        for n in range(qs, qe):
            logits = inst.logits(n)
            lz = logsumexp(logits)
            w = np.exp(logits - lz)
            y = w[lo:hi] @ inst.V[lo:hi]
            if groups:
                if samples is not None:
                    q = inst.q_scaled[n]
                    lw = samples.log_alpha + samples.omegas @ q - 0.5 * (q @ q) + log_k
                    log_h = logsumexp(lw, axis=1)
                    betas = np.stack([stable_softmax(log_h[idx]) @ inst.V[idx] for idx in groups])
                else:
                    betas = group_betas
                weights = np.array([w[idx].sum() for idx in groups])
                y = y + weights @ betas
            out[n] = y
            Z[n] = math.exp(lz)
    return EstimatorReport(out, Z, group_betas, omegas_used, wallclock_ns=time.perf_counter_ns() - t0)


# practical EVA ----------------------------------------------------------------

@dataclass
class LayoutState:
    """Per-group quantities computed once and shared by the queries of a layout."""

    groups: list
    kbar: np.ndarray
    qbar: np.ndarray
    k_tilde: np.ndarray
    omegas: np.ndarray
    betas: np.ndarray
    beta_weights: list  # softmax of log xi(k_m, w_c) within each group


def _layout_state(inst, partition, groups, cfg, sigma_mode, proposal, rng) -> LayoutState:
    summ = group_summaries(inst, partition, sigma_mode, groups)
    mu = proposal_means(summ, proposal)
    omegas = mu if cfg.mode == "deterministic-mean" else mu + rng.standard_normal(mu.shape)
    betas = np.empty((len(groups), inst.dv))
    weights = []
    for c, idx in enumerate(groups):
        a = stable_softmax(log_xi_matrix(inst.k_scaled[idx], omegas[c:c + 1])[:, 0])
        betas[c] = a @ inst.V[idx]
        weights.append(a)
    kbar = np.stack([inst.k_scaled[idx].mean(axis=0) for idx in groups])
    qbar = np.stack([inst.q_scaled[query_rows_for_group(idx, inst.N, inst.M)].mean(axis=0) for idx in groups])
    return LayoutState(list(groups), kbar, qbar, summ.k_tilde, omegas, betas, weights)


@dataclass
class BlockTrace:
    """What the backward pass needs from one query block."""

    qs: int
    qe: int
    lo: int
    hi: int
    layout: LayoutState | None
    wE: np.ndarray
    wG: np.ndarray
    out: np.ndarray


def run_eva(inst: AttentionInstance, partition: PartitionSpec, cfg: RFConfig, sigma_mode="identity",
            proposal: str = "qk", local_bias=None, masks=None, keep_trace: bool = False):
    """Shared engine of the practical and causal estimators.

    Works block by block: the block's queries attend exactly to the block's
    keys and, through ``exp(q . k_tilde_c)``, to every group. ``masks``
    (intra-block and inter-group indicator matrices) turns on causal masking.
    Returns ``(output, log_Z, layouts, traces)``.
    """
    if masks is not None and inst.N != inst.M:
        raise ValueError("causal EVA requires N == M")
    N, dv = inst.N, inst.dv
    out = np.empty((N, dv))
    log_z = np.empty(N)
    rng = make_rng(cfg.seed)
    layouts: dict[int, LayoutState] = {}
    shared_logits = {}
    traces = []
    flip = "group_term_sign" in _ACTIVE_FAULTS
    bias = None if local_bias is None else np.asarray(local_bias, dtype=np.float64)
    for b, (qs, qe) in enumerate(partition.query_ranges):
        if qe <= qs:
            continue
        lo, hi = partition.block_keys(b)
        groups = partition.groups_for_block(b)
        layout = None
        if groups:
            key = id(groups)
            if key not in layouts:
                layouts[key] = _layout_state(inst, partition, groups, cfg, sigma_mode, proposal, rng)
                if partition.over_full_range or not partition.K:
                    shared_logits[key] = inst.q_scaled @ layouts[key].k_tilde.T
            layout = layouts[key]
        q = inst.q_scaled[qs:qe]
        LE = q @ inst.k_scaled[lo:hi].T
        if bias is not None and hi > lo:
            LE = LE + bias[: qe - qs, : hi - lo]
        if layout is not None:
            LG = shared_logits[key][qs:qe] if key in shared_logits else q @ layout.k_tilde.T
        else:
            LG = np.zeros((qe - qs, 0))
        if masks is not None:
            LE, LG = _apply_causal_masks(LE, LG, masks, qs, lo, groups)
        L = np.concatenate([LE, LG], axis=1)
        lz = logsumexp(L, axis=1, keepdims=True)
        W = np.exp(L - lz)
        wE, wG = W[:, : hi - lo], W[:, hi - lo:]
        yE = wE @ inst.V[lo:hi]
        yG = wG @ layout.betas if layout is not None else 0.0
        y = yE - yG if flip else yE + yG
        out[qs:qe] = y
        log_z[qs:qe] = lz[:, 0]
        if keep_trace:
            traces.append(BlockTrace(qs, qe, lo, hi, layout, wE, wG, out[qs:qe]))
    return out, log_z, list(layouts.values()), traces


def _apply_causal_masks(LE, LG, masks, qs, lo, groups):
    nq, nk = LE.shape
    q_off = np.arange(qs, qs + nq) - lo
    k_off = np.arange(nk)
    keep_E = masks.intra_E[np.ix_(k_off, q_off)].T.astype(bool)
    LE = np.where(keep_E, LE, -np.inf)
    if groups:
        # t: the most recent group lying entirely left of the block, -1 if none
        left = [c for c, idx in enumerate(groups) if idx[-1] < lo]
        t = left[-1] if left else -1
        keep_G = masks.inter_P[:, t].astype(bool) if t >= 0 else np.zeros(len(groups), dtype=bool)
        LG = np.where(keep_G[None, :], LG, -np.inf)
    return LE, LG


def practical_eva(inst: AttentionInstance, partition: PartitionSpec, cfg: RFConfig, sigma_mode="identity",
                  proposal: str = "qk", local_bias=None) -> EstimatorReport:
    """Linear-time EVA: exact block-local terms plus one surrogate term per group.

    ``local_bias`` is an optional ``K x K`` additive bias on the block-local
    logits indexed by (query offset, key offset); zero by default.
    """
    t0 = time.perf_counter_ns()
    out, log_z, layouts, _ = run_eva(inst, partition, cfg, sigma_mode, proposal, local_bias)
    return _report(inst, partition, out, log_z, layouts, t0)


def _report(inst, partition, out, log_z, layouts, t0):
    if layouts:
        betas, omegas = layouts[0].betas, layouts[0].omegas
    else:
        betas, omegas = np.zeros((0, inst.dv)), np.zeros((0, inst.d))
    return EstimatorReport(
        output=out,
        Z_estimates=np.exp(log_z),
        group_betas=betas,
        omegas_used=omegas,
        wallclock_ns=time.perf_counter_ns() - t0,
        flop_estimate=practical_eva_flops(partition, inst.d, inst.dv),
        peak_bytes_estimate=practical_eva_peak_bytes(partition, inst.d, inst.dv),
    )


def practical_eva_flops(partition: PartitionSpec, d: int, dv: int | None = None) -> int:
    """Operation count of :func:`run_eva` (shared-group layout)."""
    dv = d if dv is None else dv
    N, M, C = partition.N, partition.M, partition.C
    total = 0
    for b, (qs, qe) in enumerate(partition.query_ranges):
        nq = qe - qs
        lo, hi = partition.block_keys(b)
        width = hi - lo + C
        total += 2 * nq * (hi - lo) * d + 2 * nq * (hi - lo) * dv  # local logits and values
        total += 4 * nq * width  # max, exp, sum, divide
        total += 2 * nq * C * dv  # group contributions
    if C:
        total += 2 * (M + N) * d  # pooling (keys and queries)
        total += 2 * M * d + 4 * M + 2 * M * dv  # log xi, group softmax, coefficients
        total += 2 * N * C * d  # group logits
    return total


def practical_eva_peak_bytes(partition: PartitionSpec, d: int, dv: int | None = None) -> int:
    """Peak live float64 buffers of :func:`run_eva`.

    Group state (summaries, directions, coefficients), the N x C group
    logits, one block's score matrix, and the output and normalizers.
    """
    dv = d if dv is None else dv
    N, K, C = partition.N, partition.K, partition.C
    block_q = max((qe - qs) for qs, qe in partition.query_ranges)
    group_state = C * (4 * d + dv) + partition.M  # kbar, qbar, k_tilde, omegas, betas, per-key weights
    scratch = 2 * block_q * (K + C)
    return 8 * (group_state + N * C + scratch + N * dv + N)


# shared-coefficient EVA and Scatterbrain --------------------------------------

def _E_chunks(E_sets, N):
    """Yield ``(query_rows, E_indices)`` with one chunk per distinct E set."""
    if isinstance(E_sets, PartitionSpec):
        for b, (qs, qe) in enumerate(E_sets.query_ranges):
            if qe > qs:
                lo, hi = E_sets.block_keys(b)
                yield np.arange(qs, qe), np.arange(lo, hi)
    else:
        if len(E_sets) != N:
            raise ValueError(f"{len(E_sets)} E sets for {N} queries")
        for n, idx in enumerate(E_sets):
            yield np.array([n]), np.unique(np.asarray(idx, dtype=int))


def scatterbrain(inst: AttentionInstance, E_sets, cfg: RFConfig) -> EstimatorReport:
    """Sparse-plus-random-feature attention with exact terms on each query's E set.

    ``E_sets`` is a :class:`PartitionSpec` (block-local sets) or one index
    array per query. The random-feature sum over ``m not in E`` is formed as
    the full linear-time sum minus the E part.
    """
    if not cfg.standard_normal:
        raise ValueError("scatterbrain uses the standard normal proposal")
    t0 = time.perf_counter_ns()
    samples = draw_samples(cfg, inst.d)
    S, M = samples.S, inst.M
    log_k = log_xi_matrix(inst.k_scaled, samples.omegas)
    kshift = log_k.max(axis=0)
    kf = np.exp(log_k - kshift)
    kv = kf.T @ inst.V
    ksum = kf.sum(axis=0)
    out = np.empty((inst.N, inst.dv))
    Z = np.empty(inst.N)
    for rows, idx in _E_chunks(E_sets, inst.N):
        lq = log_xi_matrix(inst.q_scaled[rows], samples.omegas) + kshift
        r = lq.max(axis=1)
        qf = np.exp(lq - r[:, None])
        exact = inst.q_scaled[rows] @ inst.k_scaled[idx].T
        top = np.max(exact, axis=1) if idx.size else np.full(rows.size, -np.inf)
        u = np.maximum(r - math.log(S), top)
        if idx.size == M:
            rf_num, rf_den = np.zeros((rows.size, inst.dv)), np.zeros(rows.size)
        else:
            kern_E = qf @ kf[idx].T
            rf_num = qf @ kv - kern_E @ inst.V[idx]
            rf_den = qf @ ksum - kern_E.sum(axis=1)
        c = np.exp(r - math.log(S) - u)
        ex = np.exp(exact - u[:, None])
        num = rf_num * c[:, None] + ex @ inst.V[idx]
        den = rf_den * c + ex.sum(axis=1)
        out[rows] = num / den[:, None]
        Z[rows] = den * np.exp(u)
    return EstimatorReport(out, Z, np.zeros((0, inst.dv)), samples.omegas,
                           wallclock_ns=time.perf_counter_ns() - t0)


def eva_shared_coefficient(inst: AttentionInstance, E_sets, cfg: RFConfig, shared_beta=None) -> EstimatorReport:
    """EVA with exact coefficients on E and one shared coefficient elsewhere,
    normalized by ``Z_hat = sum_E exp(logit) + sum_{not E} phi(q).phi(k)``.

    Evaluated term by term from the per-key decomposition:
    ``sum_E exp v / Z_hat + sum_{not E} (g_m - beta h_m) + beta (1 - sum_E exp / Z_hat)``.
    ``shared_beta=None`` uses the sample ratio over keys outside E.
    """
    if not cfg.standard_normal:
        raise ValueError("the shared-coefficient form uses the standard normal proposal")
    samples = draw_samples(cfg, inst.d)
    log_k = log_xi_matrix(inst.k_scaled, samples.omegas)
    out = np.empty((inst.N, inst.dv))
    Z = np.empty(inst.N)
    for rows, idx in _E_chunks(E_sets, inst.N):
        inE = np.zeros(inst.M, dtype=bool)
        inE[idx] = True
        for n in rows:
            q = inst.q_scaled[n]
            log_ht = logsumexp(samples.log_alpha + samples.omegas @ q - 0.5 * (q @ q) + log_k, axis=1)
            logits = inst.k_scaled @ q
            lvals = np.concatenate([logits[inE], log_ht[~inE]])
            u = lvals.max()
            eE = np.exp(logits[inE] - u)
            ht = np.exp(log_ht[~inE] - u)
            z_hat = eE.sum() + ht.sum()
            V_out = inst.V[~inE]
            if shared_beta is None:
                beta = ht @ V_out / ht.sum() if ht.size else np.zeros(inst.dv)
            else:
                beta = np.asarray(shared_beta, dtype=np.float64)
            g = ht[:, None] * V_out / z_hat
            h = ht / z_hat
            out[n] = (eE @ inst.V[inE]) / z_hat + g.sum(axis=0) - beta * h.sum() + beta * (1.0 - eE.sum() / z_hat)
            Z[n] = z_hat * math.exp(u)
    return EstimatorReport(out, Z, np.zeros((0, inst.dv)), samples.omegas)


def ideal_eva_flops(partition: PartitionSpec, d: int, S: int, dv: int | None = None) -> int:
    """Operation count of :func:`ideal_eva` with ratio coefficients (quadratic)."""
    dv = d if dv is None else dv
    N, M = partition.N, partition.M
    total = 2 * M * S * d  # key log xi
    for b, (qs, qe) in enumerate(partition.query_ranges):
        nq = qe - qs
        lo, hi = partition.block_keys(b)
        G = len(partition.groups_for_block(b))
        total += nq * (2 * M * d + 4 * M)  # exact logits and weights
        total += nq * 2 * (hi - lo) * dv  # exact block term
        if G:
            total += nq * (2 * S * d + 4 * M * S)  # per-key log h
            total += nq * (4 * M + 2 * M * dv + M + 2 * G * dv)  # group ratios, weights, combine
    return total


def ideal_eva_peak_bytes(partition: PartitionSpec, d: int, S: int, dv: int | None = None) -> int:
    """Key log xi (M x S), one query's M x S weights, the M-vector of exact weights, output."""
    dv = d if dv is None else dv
    N, M = partition.N, partition.M
    return 8 * (2 * M * S + S * d + M + N * dv + N)


def scatterbrain_flops(partition: PartitionSpec, d: int, S: int, dv: int | None = None) -> int:
    """Operation count of :func:`scatterbrain` on block-local E sets."""
    dv = d if dv is None else dv
    M = partition.M
    total = 2 * M * S * d + 2 * M * S + 2 * M * S * dv  # key features and summaries
    for b, (qs, qe) in enumerate(partition.query_ranges):
        nq = qe - qs
        lo, hi = partition.block_keys(b)
        e = hi - lo
        total += 2 * nq * S * d + 2 * nq * S  # query features
        total += 2 * nq * e * d + 2 * nq * e * S  # exact logits, kernel on E
        total += 2 * nq * S * (dv + 1) + 4 * nq * e * (dv + 1)  # linear sums, E correction, exact terms
        total += 4 * nq * dv
    return total


def scatterbrain_peak_bytes(partition: PartitionSpec, d: int, S: int, dv: int | None = None) -> int:
    """Key log xi and features, S x dv summary, one block's query features and E kernels, output."""
    dv = d if dv is None else dv
    N, M, K = partition.N, partition.M, partition.K
    block_q = max((qe - qs) for qs, qe in partition.query_ranges)
    return 8 * (2 * M * S + S * dv + S + S * d + block_q * (2 * S + 3 * K) + N * dv + N)
