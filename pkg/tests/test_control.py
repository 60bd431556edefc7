import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evabench.control import (
    Global,
    PerGroup,
    PerToken,
    cv_estimate,
    decompose,
    expected_h_m,
    group_mean_dominance_check,
    optimal_beta_group,
    optimal_beta_per_token,
    weighted_mse,
)
from evabench.exact import attention_weights, random_instance, softmax_attention
from evabench.features import RFConfig, draw_samples, log_xi_matrix, snis_estimate
from evabench.numerics import logsumexp
from evabench.partition import build_partition

seeds = st.integers(0, 2**32)


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


@given(seeds, st.integers(1, 6), st.booleans())
def test_decomposition_identities(seed, S, shifted):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 3, 7, d=4, dv=3)
    mu = rng.standard_normal(4) if shifted else None
    cfg = RFConfig(S=S, proposal_mean=mu, seed=seed)
    samples = draw_samples(cfg, 4)
    _, g, h = snis_estimate(inst, 1, cfg, samples)
    t = decompose(inst, 1, samples)
    assert np.all(t.h_terms > 0)
    assert rel(t.g_terms.sum(axis=0), g) <= 1e-12
    assert abs(t.h_terms.sum() - h) / h <= 1e-12
    assert np.max(np.abs(t.g_terms / t.h_terms[:, None] - inst.V)) <= 1e-12


def test_single_key_terms_equal_snis():
    inst = random_instance(1, 2, 1, d=3)
    samples = draw_samples(RFConfig(S=4, seed=2), 3)
    _, g, h = snis_estimate(inst, 0, RFConfig(S=4, seed=2), samples)
    t = decompose(inst, 0, samples)
    assert np.allclose(t.g_terms[0], g, rtol=1e-14) and t.h_terms[0] == pytest.approx(h, rel=1e-14)


@given(seeds)
def test_snis_is_a_control_variate(seed):
    inst = random_instance(seed, 2, 6, d=3, dv=2)
    cfg = RFConfig(S=5, seed=seed)
    samples = draw_samples(cfg, 3)
    value, g, h = snis_estimate(inst, 0, cfg, samples)
    est = cv_estimate(decompose(inst, 0, samples), Global(g / h), expected_h_m(inst, 0))
    assert rel(est, value) <= 1e-12


def test_zero_beta_is_plain_importance_sampling():
    inst = random_instance(3, 2, 6, d=3, dv=2)
    samples = draw_samples(RFConfig(S=5, seed=1), 3)
    _, g, _ = snis_estimate(inst, 0, RFConfig(S=5, seed=1), samples)
    Z = math.exp(logsumexp(inst.logits(0)))
    est = cv_estimate(decompose(inst, 0, samples), Global(np.zeros(2)), expected_h_m(inst, 0))
    assert rel(est, g / Z) <= 1e-12


@given(seeds, st.integers(1, 5), st.booleans())
def test_per_token_optimal_is_exact_for_any_draw(seed, S, shifted):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 4, 8, d=4, dv=3)
    Y = softmax_attention(inst)
    scheme = PerToken(optimal_beta_per_token(inst))
    mu = rng.standard_normal(4) if shifted else None
    for n in range(4):
        outs = [cv_estimate(decompose(inst, n, draw_samples(RFConfig(S, mu, s), 4)), scheme, expected_h_m(inst, n))
                for s in (seed, seed + 1)]
        assert np.max(np.abs(outs[0] - Y[n])) <= 1e-10
        assert np.max(np.abs(outs[0] - outs[1])) <= 1e-12


def test_optimal_per_token_is_values_and_ratio():
    inst = random_instance(4, 2, 5, d=3)
    assert np.array_equal(optimal_beta_per_token(inst), inst.V)
    assert not np.shares_memory(optimal_beta_per_token(inst), inst.V)
    t = decompose(inst, 0, draw_samples(RFConfig(S=3, seed=5), 3))
    assert np.allclose(t.g_terms / t.h_terms[:, None], optimal_beta_per_token(inst), rtol=1e-12)
    zero = inst.replace(V=np.zeros_like(inst.V))
    assert not np.any(optimal_beta_per_token(zero))


def test_scheme_shape_errors():
    inst = random_instance(0, 1, 4, d=2)
    t = decompose(inst, 0, draw_samples(RFConfig(S=2), 2))
    eh = expected_h_m(inst, 0)
    with pytest.raises(ValueError):
        cv_estimate(t, Global(np.zeros(3)), eh)
    with pytest.raises(ValueError):
        cv_estimate(t, PerToken(np.zeros((3, 2))), eh)
    with pytest.raises(ValueError):
        cv_estimate(t, PerGroup(np.zeros((2, 2)), [np.array([0, 1]), np.array([1, 2, 3])]), eh)
    with pytest.raises(ValueError):
        cv_estimate(t, Global(np.zeros(2)), eh[:3])


def test_per_group_scheme_with_partition_groups():
    inst = random_instance(6, 1, 6, d=2)
    part = build_partition(1, 6, 0, 3)
    t = decompose(inst, 0, draw_samples(RFConfig(S=3, seed=0), 2))
    betas = optimal_beta_group(inst, 0, part)
    est = cv_estimate(t, PerGroup(betas, part.P_sets), expected_h_m(inst, 0))
    assert est.shape == (2,)


def test_expected_h_is_the_softmax_row():
    inst = random_instance(7, 3, 5, d=3)
    W = attention_weights(inst)
    for n in range(3):
        assert np.max(np.abs(expected_h_m(inst, n) - W[n])) <= 1e-15
    same = inst.replace(K=np.broadcast_to(inst.K[0], inst.K.shape))
    assert np.allclose(expected_h_m(same, 0), 0.2, atol=1e-16)
    assert np.array_equal(expected_h_m(random_instance(1, 1, 1, d=2), 0), [1.0])


def test_expected_h_monte_carlo():
    inst = random_instance(8, 1, 4, d=2)
    R = 10**6
    samples = draw_samples(RFConfig(S=R, seed=9), 2)
    Z = math.exp(logsumexp(inst.logits(0)))
    per_draw = np.exp(log_xi_matrix(inst.q_scaled, samples.omegas)[0] + log_xi_matrix(inst.k_scaled, samples.omegas)) / Z
    se = per_draw.std(axis=1, ddof=1) / math.sqrt(R)
    assert np.all(np.abs(decompose(inst, 0, samples).h_terms / Z - expected_h_m(inst, 0)) <= 4 * se)


def test_group_optimum_special_cases():
    inst = random_instance(9, 1, 6, d=2)
    singles = [np.array([m]) for m in range(6)]
    assert np.allclose(optimal_beta_group(inst, 0, singles), inst.V)
    assert weighted_mse(inst, 0, singles, inst.V) == 0.0
    flat = inst.replace(K=np.broadcast_to(inst.K[0], inst.K.shape))
    g = [np.arange(3), np.arange(3, 6)]
    assert np.allclose(optimal_beta_group(flat, 0, g), [inst.V[:3].mean(axis=0), inst.V[3:].mean(axis=0)])
    with pytest.raises(ValueError):
        optimal_beta_group(inst, 0, [np.array([], dtype=int)])


def test_group_optimum_is_local_minimum():
    rng = np.random.default_rng(10)
    inst = random_instance(rng, 1, 9, d=3, dv=2)
    groups = [np.arange(4), np.arange(4, 9)]
    opt = optimal_beta_group(inst, 0, groups)
    base = weighted_mse(inst, 0, groups, opt)
    for _ in range(100):
        delta = rng.standard_normal(opt.shape)
        delta *= 1e-2 / np.linalg.norm(delta)
        assert base <= weighted_mse(inst, 0, groups, opt + delta)


def test_single_group_weighted_mean_beats_alternatives():
    rng = np.random.default_rng(11)
    inst = random_instance(rng, 1, 7, d=3, dv=2)
    groups = [np.arange(7)]
    best = weighted_mse(inst, 0, groups, (attention_weights(inst)[0] @ inst.V)[None])
    for _ in range(100):
        assert best <= weighted_mse(inst, 0, groups, rng.standard_normal((1, 2))) + 1e-12


def test_group_optimal_beats_global_on_random_draws():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        inst = random_instance(rng, 1, 8, d=3, dv=2)
        cuts = np.sort(rng.choice(np.arange(1, 8), size=rng.integers(0, 4), replace=False))
        groups = np.split(np.arange(8), cuts)
        best = weighted_mse(inst, 0, groups, optimal_beta_group(inst, 0, groups))
        beta = rng.standard_normal(2)
        assert best <= weighted_mse(inst, 0, groups, np.broadcast_to(beta, (len(groups), 2))) + 1e-12


def test_weighted_mse_index_set_checks():
    inst = random_instance(13, 1, 6, d=2)
    part = build_partition(6, 6, 3, 2, over_full_range=False)
    groups = part.groups_for(0)
    assert weighted_mse(inst, 0, part, optimal_beta_group(inst, 0, part), index_set=[3, 4, 5]) >= 0
    with pytest.raises(ValueError):
        weighted_mse(inst, 0, groups, np.zeros((len(groups), 2)), index_set=[0, 3, 4, 5])
    with pytest.raises(ValueError):
        weighted_mse(inst, 0, [], np.zeros((0, 2)))


def test_quadratic_growth_around_group_optimum():
    rng = np.random.default_rng(14)
    inst = random_instance(rng, 1, 10, d=3, dv=2)
    groups = [np.arange(5), np.arange(5, 10)]
    opt = optimal_beta_group(inst, 0, groups)
    base = weighted_mse(inst, 0, groups, opt)
    delta = rng.standard_normal(opt.shape)
    inc = [weighted_mse(inst, 0, groups, opt + h * delta) - base for h in (1e-3, 1e-4)]
    assert inc[0] <= 1e-5 and inc[1] <= 1e-7
    assert math.log10(inc[0] / inc[1]) == pytest.approx(2.0, abs=0.05)


@given(seeds)
def test_group_mean_dominates_shared_coefficient(seed):
    rng = np.random.default_rng(seed)
    U = int(rng.integers(2, 12))
    X = rng.standard_normal((U, 3))
    a = rng.uniform(0.05, 1, U)
    a /= a.sum()
    a[-1] = 1.0 - a[:-1].sum()
    cuts = np.sort(rng.choice(np.arange(1, U), size=rng.integers(0, U), replace=False))
    jg, jb = group_mean_dominance_check(X, rng.standard_normal(3), a, np.split(np.arange(U), cuts))
    assert jg <= jb + 1e-12


def test_dominance_edge_cases():
    X = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]])
    uniform = np.full(3, 1 / 3)
    jg, jb = group_mean_dominance_check(X, np.zeros(2), uniform, [np.arange(3)])
    assert jg == pytest.approx(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    assert jg <= jb
    groups = [np.array([0]), np.array([1, 2])]
    X2 = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    jg, jb = group_mean_dominance_check(X2, np.ones(2), uniform, groups)
    assert jg == jb == 0.0
    with pytest.raises(ValueError):
        group_mean_dominance_check(X, np.zeros(2), np.array([0.5, 0.5, 0.0]), [np.arange(3)])
    with pytest.raises(ValueError):
        group_mean_dominance_check(X, np.zeros(2), np.array([0.5, 0.5, 0.5]), [np.arange(3)])
