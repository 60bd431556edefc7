"""Named invariants run by ``evabench verify``.

Each check returns its worst observed error; it passes when that error is
within the invariant's tolerance. Statistical checks report the largest
|z-score| (tolerance 4). All randomness derives from the run seed, so the
report is reproducible byte for byte.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from ..causal import causal_eva, causal_masks
from ..control import (
    Global,
    PerToken,
    cv_estimate,
    decompose,
    expected_h_m,
    group_mean_dominance_check,
    optimal_beta_group,
    optimal_beta_per_token,
    weighted_mse,
)
from ..eva import (
    eva_shared_coefficient,
    group_summaries,
    ideal_eva,
    practical_eva,
    practical_eva_flops,
    practical_eva_peak_bytes,
    run_eva,
    scatterbrain,
)
from ..exact import AttentionInstance, attention_weights, random_instance, softmax_attention, softmax_peak_bytes
from ..features import RFConfig, draw_samples, log_xi_matrix, performer_attention, snis_estimate
from ..grad import backward_practical_eva, backward_softmax_attention
from ..numerics import logsumexp, sample_gaussian, stable_softmax
from ..partition import PartitionSpec


@dataclass(frozen=True)
class Context:
    seed: int = 0
    mc_scale: float = 1.0

    def rng(self, salt: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([salt, self.seed])))

    def count(self, n: int, floor: int = 1000) -> int:
        """Monte Carlo sample count ``n`` shrunk by ``mc_scale``."""
        return max(min(n, floor), int(n * self.mc_scale))


@dataclass(frozen=True)
class Invariant:
    id: str
    tolerance: float
    check: Callable[[Context], float]


REGISTRY: list[Invariant] = []


def invariant(id: str, tolerance: float):
    def register(fn):
        REGISTRY.append(Invariant(id, tolerance, fn))
        return fn
    return register


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def _absdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _zscore(samples: np.ndarray, target) -> float:
    """Largest |mean - target| / standard error over the columns of ``samples``."""
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    return float(np.max(np.abs(mean - target) / se))


def _naive_softmax(L: np.ndarray) -> np.ndarray:
    E = np.exp(L)
    return E / E.sum(axis=-1, keepdims=True)


# core numerics ----------------------------------------------------------------

@invariant("numerics.determinism", 0.0)
def _determinism(ctx: Context) -> float:
    inst = random_instance(ctx.rng(1), 48, d=8)
    part = PartitionSpec(48, 48, 8, 4)
    worst = _absdiff(sample_gaussian(ctx.rng(2), 5, 3), sample_gaussian(ctx.rng(2), 5, 3))
    for fn in (lambda: performer_attention(inst, RFConfig(S=16, seed=ctx.seed)).output,
               lambda: practical_eva(inst, part, RFConfig(S=1, seed=ctx.seed)).output,
               lambda: causal_eva(inst, part, RFConfig(S=1, seed=ctx.seed)).output):
        worst = max(worst, _absdiff(fn(), fn()))
    return worst


@invariant("numerics.softmax_shift_invariance", 1e-12)
def _softmax_shift(ctx: Context) -> float:
    rng = ctx.rng(3)
    worst = 0.0
    for _ in range(200):
        v = rng.standard_normal(rng.integers(1, 20)) * 5
        for c in (1e4, -1e4, 37.5, -0.3, 0.0):
            worst = max(worst, _absdiff(stable_softmax(v), stable_softmax(v + c)))
    return worst


@invariant("numerics.logsumexp_finite", 1e-12)
def _lse_finite(ctx: Context) -> float:
    rng = ctx.rng(4)
    worst = 0.0
    for _ in range(200):
        top = rng.uniform(-1e5, 1e5)
        v = top - rng.uniform(0, 699, size=rng.integers(1, 30))
        got = logsumexp(v)
        if not math.isfinite(got):
            return math.inf
        mx = float(v.max())
        ref = mx + math.log(math.fsum(math.exp(x - mx) for x in v))
        worst = max(worst, abs(got - ref) / max(abs(ref), 1.0))
    return worst


# exact attention --------------------------------------------------------------

@invariant("exact.row_stochastic", 1e-12)
def _row_stochastic(ctx: Context) -> float:
    rng = ctx.rng(5)
    worst = 0.0
    for scale in (None, 1.0, 50.0):
        for causal in (False, True):
            inst = random_instance(rng, 24, d=6, unit_norm=False, logit_scale=scale)
            W = attention_weights(inst, causal=causal)
            worst = max(worst, float(np.max(np.abs(W.sum(axis=1) - 1))), float(max(0.0, -W.min())))
    return worst


@invariant("exact.convex_hull", 1e-12)
def _convex_hull(ctx: Context) -> float:
    rng = ctx.rng(6)
    worst = 0.0
    for scale in (None, 10.0):
        inst = random_instance(rng, 32, 20, d=5, dv=3, unit_norm=False, logit_scale=scale)
        Y = softmax_attention(inst)
        lo, hi = inst.V.min(axis=0), inst.V.max(axis=0)
        worst = max(worst, float(np.max(lo - Y)), float(np.max(Y - hi)))
    return max(worst, 0.0)


@invariant("exact.naive_agreement_key_shift", 1e-10)
def _naive_agreement(ctx: Context) -> float:
    rng = ctx.rng(7)
    worst = 0.0
    for _ in range(10):
        inst = random_instance(rng, 12, 9, d=4, dv=3)
        c = rng.standard_normal(4)
        shifted = inst.replace(K=inst.K + c)
        L = inst.logits() + inst.logit_scale * (inst.Q @ c)[:, None]
        worst = max(worst, _absdiff(softmax_attention(shifted), _naive_softmax(L) @ inst.V))
    return worst


@invariant("exact.causal_prefix_softmax", 1e-12)
def _causal_prefix(ctx: Context) -> float:
    inst = random_instance(ctx.rng(8), 16, d=4)
    Y = softmax_attention(inst, causal=True)
    L = inst.logits()
    return max(_absdiff(Y[n], _naive_softmax(L[n, : n + 1]) @ inst.V[: n + 1]) for n in range(16))


# random features --------------------------------------------------------------

@invariant("rf.unbiased_kernel", 4.0)
def _unbiased_kernel(ctx: Context) -> float:
    rng = ctx.rng(9)
    d, R = 8, ctx.count(10**6)
    omegas = rng.standard_normal((R, d))
    worst = 0.0
    for _ in range(20):
        q, k = rng.standard_normal((2, d))
        q /= np.linalg.norm(q)
        k /= np.linalg.norm(k)
        L = log_xi_matrix(np.stack([q, k]), omegas)
        prod = np.exp(L[0] + L[1])
        worst = max(worst, _zscore(prod[:, None], math.exp(q @ k)))
    return worst


@invariant("rf.cancellation", 1e-12)
def _cancellation(ctx: Context) -> float:
    rng = ctx.rng(10)
    worst = 0.0
    for seed in range(5):
        one = random_instance(rng, 6, 1, d=4, dv=3)
        out = performer_attention(one, RFConfig(S=8, seed=seed)).output
        worst = max(worst, _absdiff(out, np.broadcast_to(one.V[0], out.shape)))
        same = random_instance(rng, 6, 5, d=4, dv=3)
        same = same.replace(K=np.broadcast_to(same.K[0], same.K.shape))
        out = performer_attention(same, RFConfig(S=8, seed=seed)).output
        worst = max(worst, _absdiff(out, np.broadcast_to(same.V.mean(axis=0), out.shape)))
    return worst


@invariant("rf.proposal_invariance", 4.0)
def _proposal_invariance(ctx: Context) -> float:
    """Single-draw numerator and denominator are unbiased under any proposal,
    and the pooled ratio is within its delta-method error of softmax."""
    inst = random_instance(ctx.rng(11), 2, 3, d=2)
    R = ctx.count(10**5)
    n = 0
    y = softmax_attention(inst)[n]
    Z = math.exp(logsumexp(inst.logits(n)))
    worst = 0.0
    for salt, mu in ((12, None), (13, inst.q_scaled[n] + inst.k_scaled[0])):
        cfg = RFConfig(S=R, proposal_mean=mu, seed=ctx.seed + salt)
        samples = draw_samples(cfg, inst.d)
        value, g, h = snis_estimate(inst, n, cfg, samples)
        # per-draw terms, computed directly from the directions
        w = np.exp(samples.log_normal - samples.log_proposal)
        f = np.exp(log_xi_matrix(inst.q_scaled[n:n + 1], samples.omegas)[0]
                   + log_xi_matrix(inst.k_scaled, samples.omegas))  # M x R
        g_s = (w * (inst.V.T @ f)).T / Z
        h_s = w * f.sum(axis=0) / Z
        se_g = g_s.std(axis=0, ddof=1) / math.sqrt(R)
        se_h = h_s.std(ddof=1) / math.sqrt(R)
        worst = max(worst, float(np.max(np.abs(g / Z - y) / se_g)), abs(h / Z - 1.0) / se_h)
        resid = h_s[:, None] * (inst.V.T @ f).T / f.sum(axis=0)[:, None] - h_s[:, None] * value
        se_ratio = resid.std(axis=0, ddof=1) / math.sqrt(R) / h_s.mean()
        worst = max(worst, float(np.max(np.abs(value - y) / se_ratio)))
    return worst


@invariant("rf.deterministic_mean_seed_invariance", 0.0)
def _rf_det_mean(ctx: Context) -> float:
    inst = random_instance(ctx.rng(14), 8, d=4)
    mu = inst.q_scaled[0] + inst.k_scaled[1]
    a = snis_estimate(inst, 0, RFConfig(S=4, proposal_mean=mu, seed=1, mode="deterministic-mean"))[0]
    b = snis_estimate(inst, 0, RFConfig(S=4, proposal_mean=mu, seed=ctx.seed + 99, mode="deterministic-mean"))[0]
    return _absdiff(a, b)


@invariant("rf.performer_matches_snis", 1e-12)
def _performer_snis(ctx: Context) -> float:
    inst = random_instance(ctx.rng(15), 10, 7, d=4, dv=3)
    cfg = RFConfig(S=32, seed=ctx.seed)
    Y = performer_attention(inst, cfg).output
    return max(_rel(snis_estimate(inst, n, cfg)[0], Y[n]) for n in range(inst.N))


# control variates -------------------------------------------------------------

@invariant("cv.decomposition_identities", 1e-12)
def _decomposition(ctx: Context) -> float:
    rng = ctx.rng(16)
    worst = 0.0
    for i in range(20):
        inst = random_instance(rng, 4, 9, d=4, dv=3)
        mu = None if i % 2 else rng.standard_normal(4)
        cfg = RFConfig(S=8, proposal_mean=mu, seed=ctx.seed + i)
        samples = draw_samples(cfg, 4)
        _, g, h = snis_estimate(inst, 1, cfg, samples)
        t = decompose(inst, 1, samples)
        worst = max(worst, _rel(t.g_terms.sum(axis=0), g), _rel(t.h_terms.sum(), h),
                    _rel(t.g_terms, t.h_terms[:, None] * inst.V))
    return worst


@invariant("cv.snis_as_control_variate", 1e-12)
def _snis_cv(ctx: Context) -> float:
    rng = ctx.rng(17)
    worst = 0.0
    for i in range(20):
        inst = random_instance(rng, 3, 8, d=4, dv=3)
        cfg = RFConfig(S=6, seed=ctx.seed + i)
        samples = draw_samples(cfg, 4)
        value, g, h = snis_estimate(inst, 2, cfg, samples)
        t = decompose(inst, 2, samples)
        est = cv_estimate(t, Global(g / h), expected_h_m(inst, 2))
        worst = max(worst, _rel(est, value))
    return worst


@invariant("cv.per_token_optimal_exact", 1e-10)
def _prop1(ctx: Context) -> float:
    rng = ctx.rng(18)
    worst = 0.0
    for i in range(10):
        inst = random_instance(rng, 6, 10, d=4, dv=3)
        Y = softmax_attention(inst)
        scheme = PerToken(optimal_beta_per_token(inst))
        mu = rng.standard_normal(4) if i % 2 else None
        for n in range(inst.N):
            outs = []
            for seed in (ctx.seed, ctx.seed + 1):
                t = decompose(inst, n, draw_samples(RFConfig(S=1 + i, proposal_mean=mu, seed=seed), 4))
                outs.append(cv_estimate(t, scheme, expected_h_m(inst, n)))
            worst = max(worst, _absdiff(outs[0], Y[n]), _absdiff(outs[0], outs[1]))
    return worst


@invariant("cv.constant_beta_unbiased", 4.0)
def _constant_beta(ctx: Context) -> float:
    rng = ctx.rng(19)
    inst = random_instance(rng, 1, 6, d=4, dv=3)
    R = ctx.count(2 * 10**5)
    y = softmax_attention(inst)[0]
    Z = math.exp(logsumexp(inst.logits(0)))
    samples = draw_samples(RFConfig(S=R, seed=ctx.seed + 19), 4)
    terms = decompose(inst, 0, samples)
    f = np.exp(log_xi_matrix(inst.q_scaled[:1], samples.omegas)[0]
               + log_xi_matrix(inst.k_scaled, samples.omegas))  # M x R
    worst = 0.0
    for beta in (np.zeros(3), inst.V.mean(axis=0), rng.standard_normal(3)):
        # the estimate from R draws is the mean of R single-draw estimates
        mean = cv_estimate(terms, Global(beta), expected_h_m(inst, 0))
        per_draw = beta + ((inst.V - beta).T @ f).T / Z
        se = per_draw.std(axis=0, ddof=1) / math.sqrt(R)
        worst = max(worst, float(np.max(np.abs(mean - y) / se)))
    return worst


def _random_groups(rng, M: int) -> list[np.ndarray]:
    cuts = np.sort(rng.choice(np.arange(1, M), size=rng.integers(0, min(4, M - 1) + 1), replace=False))
    return np.split(np.arange(M), cuts)


@invariant("cv.group_optimality", 1e-12)
def _prop2(ctx: Context) -> float:
    rng = ctx.rng(20)
    worst = 0.0
    for _ in range(ctx.count(1000, floor=100)):
        inst = random_instance(rng, 1, 8, d=3, dv=2)
        groups = _random_groups(rng, 8)
        best = weighted_mse(inst, 0, groups, optimal_beta_group(inst, 0, groups))
        for beta in (rng.standard_normal(2), inst.V.mean(axis=0)):
            other = weighted_mse(inst, 0, groups, np.broadcast_to(beta, (len(groups), 2)))
            worst = max(worst, best - other)
        jitter = optimal_beta_group(inst, 0, groups) + 1e-3 * rng.standard_normal((len(groups), 2))
        worst = max(worst, best - weighted_mse(inst, 0, groups, jitter))
    return max(worst, 0.0)


@invariant("cv.group_mean_dominance", 1e-12)
def _dominance(ctx: Context) -> float:
    rng = ctx.rng(21)
    worst = 0.0
    for _ in range(ctx.count(1000, floor=100)):
        U = int(rng.integers(2, 12))
        X = rng.standard_normal((U, 3))
        a = rng.uniform(0.05, 1.0, U)
        a /= a.sum()
        a[-1] = 1.0 - a[:-1].sum()
        groups = _random_groups(rng, U)
        beta = rng.standard_normal(3) if rng.random() < 0.5 else a @ X
        jg, jb = group_mean_dominance_check(X, beta, a, groups)
        worst = max(worst, jg - jb)
    return max(worst, 0.0)


@invariant("cv.first_order_optimality", 0.05)
def _first_order(ctx: Context) -> float:
    """J grows quadratically around the group optimum: the increments at
    h = 1e-3 and 1e-4 differ by a factor of 100 (|log10 ratio - 2|)."""
    rng = ctx.rng(22)
    worst = 0.0
    for _ in range(20):
        inst = random_instance(rng, 1, 10, d=3, dv=2)
        groups = _random_groups(rng, 10)
        opt = optimal_beta_group(inst, 0, groups)
        base = weighted_mse(inst, 0, groups, opt)
        delta = rng.standard_normal(opt.shape)
        inc = [weighted_mse(inst, 0, groups, opt + h * delta) - base for h in (1e-3, 1e-4)]
        worst = max(worst, abs(math.log10(inc[0] / inc[1]) - 2.0))
    return worst


@invariant("cv.expected_h_closed_form", 1e-15)
def _expected_h_exact(ctx: Context) -> float:
    inst = random_instance(ctx.rng(23), 6, 9, d=4, dv=2)
    W = attention_weights(inst)
    return max(_absdiff(expected_h_m(inst, n), W[n]) for n in range(inst.N))


@invariant("cv.expected_h_monte_carlo", 4.0)
def _expected_h_mc(ctx: Context) -> float:
    inst = random_instance(ctx.rng(24), 1, 4, d=2)
    R = ctx.count(10**6)
    samples = draw_samples(RFConfig(S=R, seed=ctx.seed + 24), 2)
    Z = math.exp(logsumexp(inst.logits(0)))
    mean = decompose(inst, 0, samples).h_terms / Z
    per_draw = np.exp(log_xi_matrix(inst.q_scaled[:1], samples.omegas)[0]
                      + log_xi_matrix(inst.k_scaled, samples.omegas)) / Z  # M x R
    se = per_draw.std(axis=1, ddof=1) / math.sqrt(R)
    return float(np.max(np.abs(mean - expected_h_m(inst, 0)) / se))


# EVA ------------------------------------------------------------------------------

def eva_oracle(inst: AttentionInstance, part: PartitionSpec, omegas_by_block, causal: bool = False) -> np.ndarray:
    """Scalar transcription of the practical (and causal) estimator.

    ``omegas_by_block(b, groups)`` supplies one direction per group.
    """
    N, M = inst.N, inst.M
    q, k, V = inst.q_scaled.tolist(), inst.k_scaled.tolist(), inst.V.tolist()
    dot = lambda a, b: math.fsum(x * y for x, y in zip(a, b))  # noqa: E731
    out = np.empty((N, inst.dv))
    for n in range(N):
        b = part.block_of_query(n)
        lo, hi = part.block_keys(b)
        groups = part.groups_for_block(b)
        E = [m for m in range(lo, hi) if not causal or m <= n]
        terms = [(dot(q[n], k[m]), V[m]) for m in E]
        omegas = omegas_by_block(b, groups) if groups else []
        for c, idx in enumerate(groups):
            if causal and idx[-1] >= lo:
                continue
            kt = [math.fsum(k[m][j] for m in idx) / len(idx) for j in range(inst.d)]
            lx = [dot(omegas[c], k[m]) - 0.5 * dot(k[m], k[m]) for m in idx]
            top = max(lx)
            a = [math.exp(x - top) for x in lx]
            beta = [math.fsum(a[i] * V[m][j] for i, m in enumerate(idx)) / math.fsum(a) for j in range(inst.dv)]
            terms.append((dot(q[n], kt), beta))
        top = max(t for t, _ in terms)
        w = [math.exp(t - top) for t, _ in terms]
        den = math.fsum(w)
        out[n] = [math.fsum(wi * v[j] for wi, (_, v) in zip(w, terms)) / den for j in range(inst.dv)]
    return out


def _mean_directions(inst, part, proposal="qk"):
    def directions(b, groups):
        s = group_summaries(inst, part, "identity", groups)
        return (s.q_tilde + s.k_tilde) if proposal == "qk" else s.q_tilde
    return directions


@invariant("eva.convexity", 1e-10)
def _convexity(ctx: Context) -> float:
    rng = ctx.rng(25)
    worst = 0.0
    for i in range(6):
        inst = random_instance(rng, 40, d=4, dv=3, unit_norm=i % 2 == 0, logit_scale=None if i < 3 else 2.0)
        lo, hi = inst.V.min(axis=0), inst.V.max(axis=0)
        mode = "sample" if i % 2 else "deterministic-mean"
        outs = [practical_eva(inst, PartitionSpec(40, 40, 8, 4, full), RFConfig(S=1, seed=ctx.seed + i, mode=mode)).output
                for full in (True, False)]
        outs.append(ideal_eva(inst, PartitionSpec(40, 40, 8, 4, False), RFConfig(S=4, seed=ctx.seed + i)).output)
        outs.append(causal_eva(inst, PartitionSpec(40, 40, 8, 4), RFConfig(S=1, seed=ctx.seed + i, mode=mode)).output)
        for Y in outs:
            worst = max(worst, float(np.max(lo - Y)), float(np.max(Y - hi)))
    return max(worst, 0.0)


@invariant("eva.limit_exact_block", 1e-12)
def _limit_block(ctx: Context) -> float:
    rng = ctx.rng(26)
    worst = 0.0
    for i in range(10):
        inst = random_instance(rng, 16, 12, d=4, dv=3)
        Y = softmax_attention(inst)
        cfg = RFConfig(S=4, seed=ctx.seed + i)
        worst = max(worst, _absdiff(ideal_eva(inst, PartitionSpec(16, 12, 12, 0), cfg).output, Y),
                    _absdiff(practical_eva(inst, PartitionSpec(16, 12, 12, 0), cfg).output, Y))
    return worst


@invariant("eva.limit_performer", 1e-12)
def _limit_performer(ctx: Context) -> float:
    rng = ctx.rng(27)
    worst = 0.0
    for i in range(10):
        inst = random_instance(rng, 12, 10, d=4, dv=3)
        cfg = RFConfig(S=8, seed=ctx.seed + i)
        worst = max(worst, _rel(ideal_eva(inst, PartitionSpec(12, 10, 0, 1), cfg).output,
                                performer_attention(inst, cfg).output))
    return worst


@invariant("eva.limit_singleton_groups", 1e-12)
def _limit_singletons(ctx: Context) -> float:
    rng = ctx.rng(28)
    worst = 0.0
    for i in range(10):
        inst = random_instance(rng, 12, 10, d=4, dv=3)
        cfg = RFConfig(S=3, seed=ctx.seed + i)
        worst = max(worst, _absdiff(ideal_eva(inst, PartitionSpec(12, 10, 0, 10), cfg).output, softmax_attention(inst)))
    return worst


@invariant("eva.scatterbrain_equivalence", 1e-10)
def _scatterbrain(ctx: Context) -> float:
    rng = ctx.rng(29)
    worst = 0.0
    for i in range(8):
        inst = random_instance(rng, 24, d=4, dv=3)
        cfg = RFConfig(S=8, seed=ctx.seed + i)
        part = PartitionSpec(24, 24, 6, 0)
        ref = scatterbrain(inst, part, cfg).output
        for beta in (None, np.zeros(3), rng.standard_normal(3)):
            worst = max(worst, _absdiff(eva_shared_coefficient(inst, part, cfg, beta).output, ref))
    return worst


def error_reduction_trial(seed: int, i: int):
    """MSE to softmax of (ideal EVA K=8 C=8 at the proposal mean, Performer S=16)."""
    inst = random_instance(np.random.Generator(np.random.PCG64(np.random.SeedSequence([30, seed, i]))), 128, d=16)
    Y = softmax_attention(inst)
    part = PartitionSpec(128, 128, 8, 8, over_full_range=False)
    eva = ideal_eva(inst, part, RFConfig(S=1, seed=seed + i, mode="deterministic-mean"), "single-sample").output
    perf = performer_attention(inst, RFConfig(S=16, seed=seed + i)).output
    return float(np.mean((eva - Y) ** 2)), float(np.mean((perf - Y) ** 2))


@functools.lru_cache(maxsize=4)
def _error_trials(ctx: Context) -> np.ndarray:
    n = max(20, int(100 * ctx.mc_scale))
    return np.array([error_reduction_trial(ctx.seed, i) for i in range(n)])


@invariant("eva.error_reduction_loss_rate", 0.10)
def _error_rate(ctx: Context) -> float:
    t = _error_trials(ctx)
    return float(np.mean(t[:, 0] >= t[:, 1]))


@invariant("eva.error_reduction_mse_ratio", 0.5)
def _error_ratio(ctx: Context) -> float:
    t = _error_trials(ctx)
    return float(t[:, 0].mean() / t[:, 1].mean())


@invariant("eva.deterministic_mean_seed_invariance", 0.0)
def _eva_det(ctx: Context) -> float:
    inst = random_instance(ctx.rng(31), 32, d=4)
    worst = 0.0
    for full in (True, False):
        part = PartitionSpec(32, 32, 8, 4, full)
        a, b = (practical_eva(inst, part, RFConfig(S=1, seed=s, mode="deterministic-mean")).output
                for s in (ctx.seed, ctx.seed + 7))
        worst = max(worst, _absdiff(a, b))
    return worst


def _linear(xs, ys) -> bool:
    return all((y3 - y2) * (x2 - x1) == (y2 - y1) * (x3 - x2)
               for (x1, y1), (x2, y2), (x3, y3) in zip(zip(xs, ys), zip(xs[1:], ys[1:]), zip(xs[2:], ys[2:])))


def second_divided_differences(xs, ys) -> list[Fraction]:
    first = [Fraction(y2 - y1, x2 - x1) for x1, x2, y1, y2 in zip(xs, xs[1:], ys, ys[1:])]
    return [(f2 - f1) / (x3 - x1) for f1, f2, x1, x3 in zip(first, first[1:], xs, xs[2:])]


@invariant("eva.flop_counter_linear", 0.0)
def _flops_linear(ctx: Context) -> float:
    Ns = [512, 1024, 2048, 4096, 8192]
    f = [practical_eva_flops(PartitionSpec(N, N, 64, 32), 32) for N in Ns]
    return float(max(abs(x) for x in second_divided_differences(Ns, f)))


@invariant("eva.practical_matches_scalar_oracle", 1e-12)
def _practical_oracle(ctx: Context) -> float:
    rng = ctx.rng(32)
    worst = 0.0
    for i, (full, mode, prop) in enumerate([(True, "deterministic-mean", "qk"), (False, "deterministic-mean", "q"),
                                            (True, "sample", "qk")]):
        inst = random_instance(rng, 14, d=3, dv=2)
        part = PartitionSpec(14, 14, 4, 3, full)
        rep = practical_eva(inst, part, RFConfig(S=1, seed=ctx.seed + i, mode=mode), proposal=prop)
        dirs = (lambda b, g: rep.omegas_used) if mode == "sample" else _mean_directions(inst, part, prop)
        worst = max(worst, _absdiff(rep.output, eva_oracle(inst, part, dirs)))
    return worst


# causal -----------------------------------------------------------------------

@invariant("causal.prefix_invariance", 1e-12)
def _causal_prefix_inv(ctx: Context) -> float:
    rng = ctx.rng(33)
    worst = 0.0
    N, K, C = 24, 4, 6
    part = PartitionSpec(N, N, K, C)
    for trial in range(20):
        inst = random_instance(rng, N, d=4, dv=3)
        cfg = RFConfig(S=1, seed=ctx.seed + trial, mode="sample" if trial % 2 else "deterministic-mean")
        base = causal_eva(inst, part, cfg).output
        n = int(rng.integers(0, N))
        cut = n + 1  # every position > n, including the rest of n's block
        Q, Kk, V = inst.Q.copy(), inst.K.copy(), inst.V.copy()
        for X in (Q, Kk, V):
            X[cut:] += rng.standard_normal(X[cut:].shape)
        pert = causal_eva(inst.replace(Q=Q, K=Kk, V=V), part, cfg).output
        worst = max(worst, _absdiff(base[: n + 1], pert[: n + 1]))
    return worst


@invariant("causal.group_boundary", 1e-12)
def _group_boundary(ctx: Context) -> float:
    inst = random_instance(ctx.rng(34), 30, d=4, dv=3)
    part = PartitionSpec(30, 30, 5, 7)
    masks = causal_masks(5, 7)
    out, _, _, traces = run_eva(inst, part, RFConfig(S=1, seed=ctx.seed), masks=masks, keep_trace=True)
    worst = 0.0
    for tr in traces:
        lay = tr.layout
        hidden = np.array([idx[-1] >= tr.lo for idx in lay.groups])
        betas = lay.betas.copy()
        betas[hidden] = 0.0
        y = tr.wE @ inst.V[tr.lo:tr.hi] + tr.wG @ betas
        worst = max(worst, _absdiff(y, out[tr.qs:tr.qe]), float(np.max(np.abs(tr.wG[:, hidden]), initial=0.0)))
    return worst


@invariant("causal.normalizer_positivity", 1e-12)
def _normalizer(ctx: Context) -> float:
    inst = random_instance(ctx.rng(35), 32, d=4, unit_norm=False)
    rep = causal_eva(inst, PartitionSpec(32, 32, 8, 4), RFConfig(S=1, seed=ctx.seed))
    own = np.exp(np.einsum("nd,nd->n", inst.q_scaled, inst.k_scaled))
    if np.any(rep.Z_estimates <= 0):
        return math.inf
    return float(max(0.0, np.max((own - rep.Z_estimates) / own)))


@invariant("causal.matches_visible_set_formula", 1e-12)
def _causal_oracle(ctx: Context) -> float:
    rng = ctx.rng(36)
    worst = 0.0
    for i, (K, C) in enumerate([(4, 3), (3, 5), (5, 1)]):
        inst = random_instance(rng, 15, d=3, dv=2)
        part = PartitionSpec(15, 15, K, C)
        rep = causal_eva(inst, part, RFConfig(S=1, seed=ctx.seed + i, mode="deterministic-mean"))
        worst = max(worst, _absdiff(rep.output, eva_oracle(inst, part, _mean_directions(inst, part), causal=True)))
    return worst


@invariant("causal.first_row_is_first_value", 0.0)
def _first_row(ctx: Context) -> float:
    inst = random_instance(ctx.rng(37), 12, d=4, dv=3)
    out = causal_eva(inst, PartitionSpec(12, 12, 4, 3), RFConfig(S=1, seed=ctx.seed)).output
    return _absdiff(out[0], inst.V[0])


# gradients --------------------------------------------------------------------

@invariant("grad.softmax_finite_difference", 1e-4)
def _grad_softmax(ctx: Context) -> float:
    rng = ctx.rng(38)
    worst = 0.0
    for _ in range(4):
        inst = random_instance(rng, 5, 6, d=3, dv=2)
        worst = max(worst, backward_softmax_attention(inst, rng.standard_normal((5, 2)), check=True).max_rel_err_vs_fd)
    return worst


@invariant("grad.practical_eva_finite_difference", 1e-4)
def _grad_eva(ctx: Context) -> float:
    rng = ctx.rng(39)
    worst = 0.0
    cfg = RFConfig(S=1, mode="deterministic-mean")
    for i, prop in enumerate(("qk", "q", "zero")):
        inst = random_instance(rng, 8, d=3, dv=2)
        part = PartitionSpec(8, 8, 4, 2, over_full_range=i != 1)
        rep = backward_practical_eva(inst, part, cfg, rng.standard_normal((8, 2)), proposal=prop, check=True)
        worst = max(worst, rep.max_rel_err_vs_fd)
    return worst


@invariant("grad.upstream_linearity", 1e-12)
def _grad_linear(ctx: Context) -> float:
    rng = ctx.rng(40)
    inst = random_instance(rng, 8, d=3, dv=2)
    part = PartitionSpec(8, 8, 4, 2)
    cfg = RFConfig(S=1, mode="deterministic-mean")
    u = rng.standard_normal((8, 2))
    worst = 0.0
    for back in (lambda x: backward_softmax_attention(inst, x), lambda x: backward_practical_eva(inst, part, cfg, x)):
        base = back(u)
        for alpha in (2.0, -0.5, 0.25, 3.7):
            got = back(alpha * u)
            for name in ("dQ", "dK", "dV"):
                a, b = getattr(got, name), alpha * getattr(base, name)
                err = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
                if name == "dV" and alpha != 3.7 and err:
                    return math.inf  # power-of-two scalings commute exactly
                worst = max(worst, err)
    return worst


# bench plumbing -------------------------------------------------------------------

@invariant("bench.memory_counter_growth", 0.0)
def _memory(ctx: Context) -> float:
    """EVA's peak-byte counter is exactly linear in N; softmax's is exactly
    quadratic with a positive leading term. Reports the number of violations."""
    Ns = [512, 1024, 2048, 4096, 8192]
    eva = [practical_eva_peak_bytes(PartitionSpec(N, N, 64, 32), 32) for N in Ns]
    soft = [softmax_peak_bytes(N, N, 32) for N in Ns]
    dd = second_divided_differences(Ns, soft)
    return float((not _linear(Ns, eva)) + (len(set(dd)) != 1) + (dd[0] <= 0))


@invariant("bench.record_order_and_stable_errors", 0.0)
def _bench_records(ctx: Context) -> float:
    from .config import BenchConfig
    from .harness import run_bench, run_error
    cfg = BenchConfig(lengths=[32, 64], d=8, K=8, C=4, S=8, estimators=["softmax", "eva-practical", "performer"],
                      seeds=[ctx.seed, ctx.seed + 1], repeats=3, warmup=1)
    recs = run_bench(cfg)
    bad = sum(not (r.p10_ns <= r.median_ns <= r.p90_ns) for r in recs) + (len(recs) != 6)
    a, b = run_error(cfg), run_error(cfg)
    bad += sum(x["mse"] != y["mse"] for x, y in zip(a, b))
    return float(bad)


# runner -----------------------------------------------------------------------

def run_invariants(ctx: Context, only=None) -> list[dict]:
    results = []
    for inv in REGISTRY:
        if only is not None and inv.id not in only:
            continue
        err = float(inv.check(ctx))
        ok = err <= inv.tolerance
        results.append({"id": inv.id, "status": "pass" if ok else "fail", "worst_error": err,
                        "tolerance": inv.tolerance})
    return results
