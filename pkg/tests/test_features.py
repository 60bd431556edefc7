import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evabench.exact import AttentionInstance, random_instance, softmax_attention
from evabench.features import (
    RFConfig,
    draw_samples,
    feature_map,
    log_xi,
    log_xi_matrix,
    performer_attention,
    performer_flops,
    samples_from_omegas,
    snis_estimate,
)
from evabench.numerics import logsumexp


def test_log_xi_special_points():
    x = np.array([0.3, -1.2, 2.0])
    assert log_xi(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0
    assert log_xi(x, np.zeros(3)) == pytest.approx(-0.5 * float(x @ x), abs=1e-15)
    with pytest.raises(ValueError):
        log_xi(x, np.zeros(2))


def test_kernel_estimate_within_one_percent():
    rng = np.random.default_rng(5)
    q, k = rng.standard_normal((2, 6))
    q /= np.linalg.norm(q)
    k /= np.linalg.norm(k)
    omegas = rng.standard_normal((10**6, 6))
    L = log_xi_matrix(np.stack([q, k]), omegas)
    est = np.exp(L[0] + L[1]).mean()
    assert abs(est / math.exp(q @ k) - 1) < 0.01


def test_feature_map_zero_row_and_zero_direction():
    samples = draw_samples(RFConfig(S=9, seed=1), 3)
    assert np.allclose(feature_map(np.zeros((1, 3)), samples), 1 / 3, atol=1e-16)
    X = np.random.default_rng(0).standard_normal((4, 3))
    one = samples_from_omegas(np.zeros((1, 3)))
    assert np.allclose(feature_map(X, one)[:, 0], np.exp(-0.5 * np.sum(X**2, axis=1)), atol=1e-16)


def test_feature_map_matches_scalar_loop():
    X = np.random.default_rng(1).standard_normal((3, 2))
    samples = draw_samples(RFConfig(S=4, seed=11), 2)
    Phi = feature_map(X, samples)
    for i in range(3):
        for s in range(4):
            w = samples.omegas[s]
            ref = math.exp(w[0] * X[i, 0] + w[1] * X[i, 1] - 0.5 * (X[i, 0] ** 2 + X[i, 1] ** 2)) / 2.0
            assert Phi[i, s] == pytest.approx(ref, rel=1e-14)


def test_feature_map_overflow():
    samples = samples_from_omegas(np.full((1, 2), 40.0))
    with pytest.raises(OverflowError):
        feature_map(np.full((1, 2), 15.0), samples)


def test_config_validation():
    with pytest.raises(ValueError):
        RFConfig(S=0)
    with pytest.raises(ValueError):
        RFConfig(mode="bogus")
    with pytest.raises(ValueError):
        RFConfig(S=3, proposal_mean=np.zeros((2, 4)))
    assert RFConfig(proposal_mean=np.zeros(4)).standard_normal
    with pytest.raises(ValueError):
        draw_samples(RFConfig(S=2, proposal_mean=np.ones(3)), 4)


def test_log_alpha_for_standard_normal():
    s = draw_samples(RFConfig(S=8, seed=0), 3)
    assert np.allclose(s.log_alpha, -math.log(8))


@pytest.mark.parametrize("seed", [0, 1, 99])
def test_performer_cancellation(seed):
    inst = random_instance(seed, 5, 1, d=4)
    assert np.allclose(performer_attention(inst, RFConfig(S=7, seed=seed)).output, inst.V[0], rtol=0, atol=1e-12)
    same = random_instance(seed, 5, 6, d=4)
    same = same.replace(K=np.broadcast_to(same.K[2], (6, 4)))
    out = performer_attention(same, RFConfig(S=7, seed=seed)).output
    assert np.allclose(out, same.V.mean(axis=0), rtol=0, atol=1e-12)


def test_performer_converges_to_softmax():
    inst = random_instance(3, 16, d=4)
    rep = performer_attention(inst, RFConfig(S=10**4, seed=4))
    assert np.max(np.abs(rep.output - softmax_attention(inst))) < 0.05
    assert rep.flop_estimate == performer_flops(16, 16, 4, 10**4)
    assert np.all(rep.Z_estimates > 0)


def test_performer_requires_standard_normal():
    inst = random_instance(0, 3, d=2)
    with pytest.raises(ValueError):
        performer_attention(inst, RFConfig(S=2, proposal_mean=np.ones(2)))


def test_performer_survives_large_logits():
    inst = random_instance(2, 8, d=4, unit_norm=False, logit_scale=20.0)
    out = performer_attention(inst, RFConfig(S=64, seed=0)).output
    assert np.all(np.isfinite(out))
    assert np.all(out >= inst.V.min(axis=0) - 1e-12) and np.all(out <= inst.V.max(axis=0) + 1e-12)


@given(st.integers(0, 2**32))
def test_snis_standard_normal_matches_performer(seed):
    inst = random_instance(seed, 6, 5, d=3, dv=2)
    cfg = RFConfig(S=12, seed=seed)
    Y = performer_attention(inst, cfg).output
    for n in range(6):
        value, g, h = snis_estimate(inst, n, cfg)
        assert np.max(np.abs(value - Y[n])) <= 1e-12
        assert np.allclose(value, g / h, rtol=1e-15, atol=0)


def test_snis_single_key():
    inst = random_instance(4, 2, 1, d=3)
    assert np.allclose(snis_estimate(inst, 0, RFConfig(S=5, proposal_mean=np.ones(3), seed=2))[0], inst.V[0])


def test_snis_shifted_proposal_large_sample():
    inst = random_instance(8, 1, 2, d=2)
    mu = inst.q_scaled[0] + inst.k_scaled[0]
    R = 10**5
    cfg = RFConfig(S=R, proposal_mean=mu, seed=3)
    value, g, h = snis_estimate(inst, 0, cfg)
    y = softmax_attention(inst)[0]
    # delta-method standard error of the ratio from the per-draw weights
    s = draw_samples(cfg, 2)
    w = np.exp(s.log_normal - s.log_proposal
               + log_xi_matrix(inst.q_scaled, s.omegas)[0][None, :]
               + log_xi_matrix(inst.k_scaled, s.omegas))  # M x R
    f = (inst.V.T @ w).T
    r = f - w.sum(axis=0)[:, None] * value
    se = r.std(axis=0, ddof=1) / math.sqrt(R) / w.sum(axis=0).mean()
    assert np.all(np.abs(value - y) <= 3 * se)


def test_snis_z_free_scale():
    inst = random_instance(9, 1, 5, d=3)
    _, g, h = snis_estimate(inst, 0, RFConfig(S=2 * 10**5, seed=1))
    Z = math.exp(logsumexp(inst.logits(0)))
    assert h / Z == pytest.approx(1.0, abs=0.02)


def test_deterministic_mean_ignores_seed():
    inst = random_instance(5, 3, d=3)
    mu = np.array([0.2, -0.1, 0.4])
    a = snis_estimate(inst, 1, RFConfig(S=3, proposal_mean=mu, seed=0, mode="deterministic-mean"))
    b = snis_estimate(inst, 1, RFConfig(S=3, proposal_mean=mu, seed=77, mode="deterministic-mean"))
    assert np.array_equal(a[0], b[0]) and a[2] == b[2]


def test_snis_underflow_reported():
    inst = AttentionInstance([[0.0]], [[0.0]], [[1.0]], logit_scale=1.0)
    with pytest.raises(FloatingPointError):
        snis_estimate(inst, 0, RFConfig(S=1, proposal_mean=[[60.0]], mode="deterministic-mean"))
